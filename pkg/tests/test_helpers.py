import json
import math
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Any

import pandas as pd

from stockrater.market_data import Company, PriceSeries, Universe

COMPANIES = [
    ("ACM", "Acme Corp", ["Acme"]),
    ("BRC", "Birch Industries", ["Birch"]),
    ("CBT", "Cobalt Systems", ["Cobalt"]),
    ("DLT", "Delta Foods", []),
    ("EMB", "Ember Energy", ["Ember"]),
    ("FLC", "Falcon Motors", ["Falcon"]),
    ("GRN", "Granite Bank", []),
    ("HBR", "Harbor Health", ["Harbor"]),
    ("ION", "Ion Labs", []),
    ("JNP", "Juniper Retail", ["Juniper"]),
]
SECTORS = {"Technology": "SEC_TECH", "Industrials": "SEC_IND"}
MARKET_INDEX = "MKT"
PRICE_START = date(2021, 1, 1)
PRICE_END = date(2023, 12, 29)
LEAKED_REVENUE = 777_777_777.0
LEAKED_TITLE = "Acme Corp leaked merger terms"


@dataclass
class SyntheticMarket:
    root: Path
    config_path: Path
    universe_path: Path
    prices_path: Path
    news_path: Path
    analyst_path: Path
    fundamentals_path: Path
    output_dir: Path


def sector_of(i: int) -> str:
    return "Technology" if i % 2 == 0 else "Industrials"


def monthly_drift(i: int) -> float:
    return (i - 4.5) * 0.006


def company_prices(i: int, days: pd.DatetimeIndex) -> list[float]:
    """Steady monthly drift with a small deterministic wiggle, so momentum carries forward."""
    return [100.0 * math.exp(monthly_drift(i) * n / 21 + 0.004 * math.sin(n / 5 + i)) for n in range(len(days))]


def build_prices(late_starts: dict[str, date] | None = None) -> pd.DataFrame:
    late_starts = late_starts or {}
    days = pd.bdate_range(PRICE_START, PRICE_END)
    frames = []
    by_sector: dict[str, list[list[float]]] = {s: [] for s in SECTORS}
    all_prices = []
    for i, (ticker, _, _) in enumerate(COMPANIES):
        prices = company_prices(i, days)
        by_sector[sector_of(i)].append(prices)
        all_prices.append(prices)
        frame = pd.DataFrame({"date": days, "ticker": ticker, "adj_close": prices})
        if ticker in late_starts:
            frame = frame[frame["date"] >= pd.Timestamp(late_starts[ticker])]
        frames.append(frame)
    for sector, index_id in SECTORS.items():
        frames.append(pd.DataFrame({"date": days, "ticker": index_id, "adj_close": [sum(p) / len(p) for p in zip(*by_sector[sector])]}))
    frames.append(pd.DataFrame({"date": days, "ticker": MARKET_INDEX, "adj_close": [sum(p) / len(p) for p in zip(*all_prices)]}))
    df = pd.concat(frames, ignore_index=True)
    df["date"] = df["date"].dt.strftime("%Y-%m-%d")
    return df


def build_universe_json() -> dict[str, Any]:
    return {
        "market_index": MARKET_INDEX,
        "sector_indices": dict(SECTORS),
        "companies": [
            {"ticker": t, "name": name, "aliases": aliases, "sector": sector_of(i)}
            for i, (t, name, aliases) in enumerate(COMPANIES)
        ],
    }


def build_articles() -> list[dict[str, Any]]:
    articles = []
    for month in range(1, 13):
        for i, (ticker, name, _) in enumerate(COMPANIES):
            mood = "raised its outlook" if monthly_drift(i) > 0 else "cut its outlook"
            articles.append({
                "ticker": ticker,
                "published": date(2022, month, 10).isoformat(),
                "url": f"https://news.example.com/{ticker.lower()}/2022-{month:02d}",
                "title": f"{name} {mood}",
                "body": f"{name} {mood} after a busy month. Analysts expect more of the same.",
            })
        articles.append({
            "ticker": None,
            "published": date(2022, month, 20).isoformat(),
            "url": f"https://news.example.com/recipes/2022-{month:02d}",
            "title": "Weekend recipes",
            "body": "Nothing here is about any listed company.",
        })
    # Published in the last planned month, so no planned prompt may see it
    articles.append({
        "ticker": "ACM",
        "published": "2022-12-15",
        "url": "https://news.example.com/acm/leak",
        "title": LEAKED_TITLE,
        "body": "Acme Corp is said to be in talks.",
    })
    return articles


def build_analyst_rows() -> list[dict[str, str]]:
    terms = ["Buy", "Overweight", "Hold", "Underweight", "Sell"]
    rows = []
    for month in range(7, 13):
        for i, (ticker, _, _) in enumerate(COMPANIES[:5]):
            rows.append({
                "firm": f"Firm {i % 3}",
                "ticker": ticker,
                "date": date(2022, month, 1).isoformat(),
                "action": "main" if month > 7 else "init",
                "term": terms[(i + month) % 5],
            })
    rows.append({"firm": "Firm 9", "ticker": "ACM", "date": "2022-08-01", "action": "up", "term": "Overwight"})
    return rows


def build_filings() -> list[dict[str, Any]]:
    period_ends = [date(2021, 3, 31), date(2021, 6, 30), date(2021, 9, 30), date(2021, 12, 31),
                   date(2022, 3, 31), date(2022, 6, 30), date(2022, 9, 30)]
    rows = []
    for i, (ticker, _, _) in enumerate(COMPANIES):
        for q, period_end in enumerate(period_ends):
            filing_date = period_end + timedelta(days=30)
            revenue = 1_000_000.0 * (i + 1) + 50_000.0 * q
            if ticker == "ACM" and period_end == date(2022, 9, 30):
                # Filed late, after every planned rating date
                filing_date = date(2022, 12, 15)
                revenue = LEAKED_REVENUE
            for metric, value in (("revenue", revenue), ("net_income", revenue * 0.1), ("eps", 1.25 + q * 0.05)):
                rows.append({"ticker": ticker, "period_end": period_end.isoformat(), "filing_date": filing_date.isoformat(),
                             "metric": metric, "value": value})
    return rows


def build_config(**overrides: Any) -> dict[str, Any]:
    config = {
        "universe": "universe.json",
        "data": {
            "prices": "prices.csv",
            "news": "articles.jsonl",
            "analyst_ratings": "analyst_ratings.csv",
            "fundamentals": "fundamentals.csv",
        },
        "method": "vanilla",
        "start_month": "2022-07",
        "end_month": "2022-12",
        "output_dir": "runs/out",
        "seed": 7,
        "gateway": {"backend": "mock", "concurrency": 4},
    }
    merge_and_remove(config, overrides)
    return config


def write_synthetic_market(root: Path, late_starts: dict[str, date] | None = None, **config_overrides: Any) -> SyntheticMarket:
    root.mkdir(parents=True, exist_ok=True)
    market = SyntheticMarket(
        root=root,
        config_path=root / "config.json",
        universe_path=root / "universe.json",
        prices_path=root / "prices.csv",
        news_path=root / "articles.jsonl",
        analyst_path=root / "analyst_ratings.csv",
        fundamentals_path=root / "fundamentals.csv",
        output_dir=root / "runs" / "out",
    )
    market.universe_path.write_text(json.dumps(build_universe_json(), indent=2))
    build_prices(late_starts).to_csv(market.prices_path, index=False, lineterminator="\n")
    market.news_path.write_text("".join(json.dumps(a) + "\n" for a in build_articles()))
    pd.DataFrame(build_analyst_rows()).to_csv(market.analyst_path, index=False, lineterminator="\n")
    pd.DataFrame(build_filings()).to_csv(market.fundamentals_path, index=False, lineterminator="\n")
    write_config(market, **config_overrides)
    return market


def write_config(market: SyntheticMarket, **overrides: Any) -> dict[str, Any]:
    config = build_config(**overrides)
    market.config_path.write_text(json.dumps(config, indent=2))
    return config


def make_universe(n: int, sectors: int = 2) -> Universe:
    companies = tuple(Company(f"C{i:03d}", f"Company {i:03d}", f"S{i % sectors}") for i in range(n))
    return Universe(companies=companies, market_index_id="MKT", sector_index_ids={f"S{s}": f"IDX{s}" for s in range(sectors)})


def series_from(instrument_id: str, start: date, prices: list[float]) -> PriceSeries:
    days = pd.bdate_range(start, periods=len(prices))
    return PriceSeries(instrument_id, pd.Series(prices, index=days))


def merge_and_remove(original: dict[str, Any], updates: dict[str, Any]) -> None:
    """
    Updates `original` in place by merging values from `updates`.
    If a key in `updates` has a value of None, it will be removed from `original`.
    """
    if not updates:
        return
    for key, value in updates.items():
        if value is None:
            original.pop(key, None)  # Remove key if it exists
        elif isinstance(value, dict):
            if key in original:
                merge_and_remove(original[key], value)
            else:
                original[key] = value
        else:
            original[key] = value  # Update or add key-value pair
