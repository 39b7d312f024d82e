import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd
from jsonschema import ValidationError

from stockrater.config import UNIVERSE_SCHEMA
from stockrater.errors import DataError, InsufficientHistory, NoSeries, NoTradingDate
from stockrater.utils import add_months

logger = logging.getLogger(__name__)

PRICE_COLUMNS = ("date", "ticker", "adj_close")
TRAILING_WINDOWS = (1, 3, 12)
RANGE_WINDOW_DAYS = 365
VOLATILITY_WINDOW_DAYS = 90


@dataclass(frozen=True)
class PriceSeries:
    """Adjusted close prices for one instrument, indexed by strictly increasing trading dates."""
    instrument_id: str
    prices: pd.Series

    def __post_init__(self) -> None:
        index = pd.DatetimeIndex(self.prices.index)
        if not index.is_monotonic_increasing or index.has_duplicates:
            raise DataError(f"Dates for [{self.instrument_id}] must be strictly increasing")
        if (self.prices <= 0).any() or self.prices.isna().any():
            raise DataError(f"Prices for [{self.instrument_id}] must all be positive")
        object.__setattr__(self, "prices", pd.Series(self.prices.to_numpy(dtype=float), index=index, name=self.instrument_id))

    @classmethod
    def from_pairs(cls, instrument_id: str, observations: Sequence[tuple[date, float]]) -> "PriceSeries":
        dates = [pd.Timestamp(d) for d, _ in observations]
        return cls(instrument_id, pd.Series([p for _, p in observations], index=pd.DatetimeIndex(dates), dtype=float))

    def __len__(self) -> int:
        return len(self.prices)

    @property
    def first_date(self) -> date:
        return self.prices.index[0].date()

    @property
    def last_date(self) -> date:
        return self.prices.index[-1].date()

    def price_on(self, d: date) -> float:
        return float(self.prices.loc[pd.Timestamp(d)])

    def last_on_or_before(self, d: date) -> tuple[date, float] | None:
        position = self.prices.index.searchsorted(pd.Timestamp(d), side="right") - 1
        if position < 0:
            return None
        return self.prices.index[position].date(), float(self.prices.iloc[position])

    def between(self, start_exclusive: date, end_inclusive: date) -> pd.Series:
        index = self.prices.index
        mask = (index > pd.Timestamp(start_exclusive)) & (index <= pd.Timestamp(end_inclusive))
        return self.prices[mask]


@dataclass(frozen=True)
class Company:
    ticker: str
    name: str
    sector: str
    aliases: tuple[str, ...] = ()


@dataclass(frozen=True)
class Universe:
    companies: tuple[Company, ...]
    market_index_id: str
    sector_index_ids: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        tickers = [c.ticker for c in self.companies]
        duplicates = sorted({t for t in tickers if tickers.count(t) > 1})
        if duplicates:
            raise DataError(f"Duplicate tickers in universe: {duplicates}")
        unmapped = sorted({c.sector for c in self.companies if c.sector not in self.sector_index_ids})
        if unmapped:
            raise DataError(f"No sector index declared for sector(s): {unmapped}")

    @property
    def tickers(self) -> list[str]:
        return [c.ticker for c in self.companies]

    def company(self, ticker: str) -> Company:
        for c in self.companies:
            if c.ticker == ticker:
                return c
        raise DataError(f"Ticker [{ticker}] is not in the universe")

    def sector_index_for(self, ticker: str) -> str:
        return self.sector_index_ids[self.company(ticker).sector]

    def constituents(self, sector: str) -> list[Company]:
        return [c for c in self.companies if c.sector == sector]


@dataclass(frozen=True)
class TechnicalSnapshot:
    current_price: float
    week52_min: float
    week52_max: float
    volatility_90d: float
    returns_1m: float
    returns_3m: float
    returns_12m: float
    market_relative_1m: float
    market_relative_3m: float
    market_relative_12m: float
    sector_relative_1m: float
    sector_relative_3m: float
    sector_relative_12m: float
    as_of: date
    price_date: date

    VALUE_FIELDS = (
        "current_price", "week52_min", "week52_max", "volatility_90d",
        "returns_1m", "returns_3m", "returns_12m",
        "market_relative_1m", "market_relative_3m", "market_relative_12m",
        "sector_relative_1m", "sector_relative_3m", "sector_relative_12m",
    )

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in self.VALUE_FIELDS)


def resolve_trading_date(calendar_date: date, series: PriceSeries, max_roll_days: int = 7) -> date:
    """
    Rolls forward to the first observation on or after calendar_date. Past the end of the series,
    the last observation is used if it lies within max_roll_days.
    """
    if len(series) == 0:
        raise NoTradingDate(f"Series [{series.instrument_id}] is empty")
    index = series.prices.index
    position = index.searchsorted(pd.Timestamp(calendar_date), side="left")
    if position < len(index):
        resolved = index[position].date()
        if (resolved - calendar_date).days <= max_roll_days:
            return resolved
    else:
        last = index[-1].date()
        if (calendar_date - last).days <= max_roll_days:
            return last
    raise NoTradingDate(f"No trading date for [{series.instrument_id}] within [{max_roll_days}] days of [{calendar_date}]")


def compute_return(series: PriceSeries, t: date, p: int, max_roll_days: int = 7) -> float:
    start = resolve_trading_date(t, series, max_roll_days)
    end = resolve_trading_date(add_months(t, p), series, max_roll_days)
    start_price = series.price_on(start)
    return (series.price_on(end) - start_price) / start_price


def compute_relative_return(company_return: float, benchmark_return: float) -> float:
    return company_return - benchmark_return


def trailing_return(series: PriceSeries, as_of: date, months: int) -> float:
    """Return over the trailing calendar-month window ending at as_of, using point-in-time lookups."""
    end = series.last_on_or_before(as_of)
    start = series.last_on_or_before(add_months(as_of, -months))
    if end is None or start is None:
        raise InsufficientHistory(series.instrument_id, [f"{months}m"])
    return (end[1] - start[1]) / start[1]


def build_technical_snapshot(company: PriceSeries, market: PriceSeries, sector: PriceSeries, as_of: date) -> TechnicalSnapshot:
    failed = []
    latest = company.last_on_or_before(as_of)
    if latest is None:
        raise InsufficientHistory(company.instrument_id, ["current price"])
    price_date, current_price = latest

    # History must start strictly before the 12-month window opens
    if company.first_date >= add_months(as_of, -max(TRAILING_WINDOWS)):
        failed.append(f"{max(TRAILING_WINDOWS)}m")

    range_window = company.between(as_of - timedelta(days=RANGE_WINDOW_DAYS), as_of)

    volatility_window = company.between(as_of - timedelta(days=VOLATILITY_WINDOW_DAYS), as_of)
    daily_returns = volatility_window.pct_change().dropna()
    if len(daily_returns) < 2:
        failed.append(f"{VOLATILITY_WINDOW_DAYS}d volatility")

    if failed:
        raise InsufficientHistory(company.instrument_id, failed)

    returns = {}
    for months in TRAILING_WINDOWS:
        own = trailing_return(company, as_of, months)
        returns[months] = (
            own,
            compute_relative_return(own, trailing_return(market, as_of, months)),
            compute_relative_return(own, trailing_return(sector, as_of, months)),
        )

    return TechnicalSnapshot(
        current_price=current_price,
        week52_min=float(range_window.min()),
        week52_max=float(range_window.max()),
        volatility_90d=float(np.std(daily_returns.to_numpy(), ddof=1)),
        returns_1m=returns[1][0],
        returns_3m=returns[3][0],
        returns_12m=returns[12][0],
        market_relative_1m=returns[1][1],
        market_relative_3m=returns[3][1],
        market_relative_12m=returns[12][1],
        sector_relative_1m=returns[1][2],
        sector_relative_3m=returns[3][2],
        sector_relative_12m=returns[12][2],
        as_of=as_of,
        price_date=price_date,
    )


def equal_weighted_index(members: Sequence[PriceSeries], instrument_id: str) -> PriceSeries:
    """Equal-weighted composite: each member normalised to 1 on the first common date, then averaged."""
    if not members:
        raise NoSeries(f"Cannot build [{instrument_id}] from an empty set of series")
    frame = pd.concat([m.prices for m in members], axis=1, join="inner")
    if frame.empty:
        raise DataError(f"Series used for [{instrument_id}] share no common dates")
    normalised = frame / frame.iloc[0]
    return PriceSeries(instrument_id, normalised.mean(axis=1))


def market_series(universe: Universe, prices: Mapping[str, PriceSeries]) -> PriceSeries:
    if universe.market_index_id in prices:
        return prices[universe.market_index_id]
    logger.info("Market index [%s] not found in prices, so using an equal-weighted universe composite", universe.market_index_id)
    members = [prices[t] for t in universe.tickers if t in prices]
    return equal_weighted_index(members, universe.market_index_id)


def load_prices(csv_path: Path) -> dict[str, PriceSeries]:
    df = pd.read_csv(csv_path, dtype={"ticker": str})
    missing = [c for c in PRICE_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"Price file [{csv_path}] is missing column(s): {missing}")
    try:
        df["date"] = pd.to_datetime(df["date"], format="ISO8601")
    except ValueError as e:
        raise DataError(f"Price file [{csv_path}] has an invalid date: {e}") from e

    duplicated = df[df.duplicated(subset=["ticker", "date"], keep=False)]
    if not duplicated.empty:
        first = duplicated.iloc[0]
        raise DataError(f"Duplicate price for [{first['ticker']}] on [{first['date'].date()}]")

    series = {}
    for ticker, group in df.sort_values(["ticker", "date"]).groupby("ticker", sort=True):
        series[ticker] = PriceSeries(ticker, pd.Series(group["adj_close"].to_numpy(dtype=float), index=pd.DatetimeIndex(group["date"])))
    logger.info("Loaded prices for [%d] instruments from: %s", len(series), csv_path)
    return series


def load_universe(json_path: Path) -> Universe:
    with open(json_path, "r") as f:
        try:
            data = json.load(f)
        except json.decoder.JSONDecodeError as e:
            raise DataError(f"Failed to load universe [{json_path}]: {e}") from e
    try:
        jsonschema.validate(instance=data, schema=UNIVERSE_SCHEMA)
    except ValidationError as e:
        raise DataError(f"Invalid universe [{json_path}]: {e.message}") from e

    companies = tuple(
        Company(ticker=c["ticker"], name=c["name"], sector=c["sector"], aliases=tuple(c.get("aliases", [])))
        for c in data["companies"]
    )
    universe = Universe(companies=companies, market_index_id=data["market_index"], sector_index_ids=dict(data["sector_indices"]))
    logger.info("Loaded universe of [%d] companies from: %s", len(companies), json_path)
    return universe
