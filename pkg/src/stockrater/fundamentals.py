import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from datetime import date
from importlib import resources
from pathlib import Path

import pandas as pd

from stockrater.errors import DataError, LookaheadError, NoFilings
from stockrater.templates import render

logger = logging.getLogger(__name__)

MAX_QUARTERS = 4
FILING_COLUMNS = ("ticker", "period_end", "filing_date", "metric", "value")


@dataclass(frozen=True)
class FilingRow:
    ticker: str
    period_end: date
    filing_date: date
    metric: str
    value: float


@dataclass(frozen=True)
class Quarter:
    period_end: date
    filing_date: date
    metrics: dict[str, float] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return f"{self.period_end.year} Q{(self.period_end.month - 1) // 3 + 1}"


@dataclass(frozen=True)
class FundamentalsTable:
    ticker: str
    as_of: date
    quarters: tuple[Quarter, ...]
    metric_definitions: dict[str, str]

    def __post_init__(self) -> None:
        if len(self.quarters) > MAX_QUARTERS:
            raise ValueError(f"A fundamentals table holds at most {MAX_QUARTERS} quarters, got {len(self.quarters)}")
        undefined = {m for q in self.quarters for m in q.metrics} - set(self.metric_definitions)
        if undefined:
            raise ValueError(f"Metrics without a definition: {sorted(undefined)}")
        self.check_point_in_time()

    def check_point_in_time(self) -> None:
        for quarter in self.quarters:
            if quarter.period_end >= self.as_of or quarter.filing_date >= self.as_of:
                raise LookaheadError(
                    f"Quarter [{quarter.label}] for [{self.ticker}] was filed on [{quarter.filing_date}], not before [{self.as_of}]")

    @property
    def metrics(self) -> list[str]:
        """Metrics present in any quarter, in definition order."""
        present = {m for q in self.quarters for m in q.metrics}
        return [m for m in self.metric_definitions if m in present]

    @property
    def max_input_date(self) -> date | None:
        return max((q.filing_date for q in self.quarters), default=None)


def ingest_fundamentals(rows: Iterable[FilingRow], ticker: str, as_of: date,
                        metric_definitions: Mapping[str, str]) -> FundamentalsTable:
    """
    Builds the table from the newest 4 filings visible on as_of. A filing is visible once its
    filing date has passed, whatever its period end. Metrics a filing does not report stay absent.
    """
    by_period: dict[date, dict[str, float]] = defaultdict(dict)
    filed_on: dict[date, date] = {}
    undefined = set()
    # Oldest filing first so a later visible restatement of the same period wins
    visible = sorted((r for r in rows if r.ticker == ticker and r.filing_date < as_of and r.period_end < as_of),
                     key=lambda r: (r.filing_date, r.period_end, r.metric))
    for row in visible:
        if row.metric not in metric_definitions:
            undefined.add(row.metric)
            continue
        by_period[row.period_end][row.metric] = row.value
        filed_on[row.period_end] = max(filed_on.get(row.period_end, row.filing_date), row.filing_date)
    if undefined:
        logger.warning("Dropping metric(s) without a definition for [%s]: %s", ticker, ", ".join(sorted(undefined)))
    if not filed_on:
        raise NoFilings(f"No filings for [{ticker}] were filed before [{as_of}]")

    newest = sorted(filed_on)[-MAX_QUARTERS:]
    quarters = tuple(Quarter(period_end=p, filing_date=filed_on[p], metrics=dict(by_period[p])) for p in newest)
    return FundamentalsTable(ticker=ticker, as_of=as_of, quarters=quarters, metric_definitions=dict(metric_definitions))


def format_value(value: float | None) -> str:
    if value is None:
        return "N/A"
    if float(value).is_integer():
        return f"{value:,.0f}"
    return f"{value:,.2f}" if abs(value) >= 1 else f"{value:,.4f}"


def render_fundamentals_html(table: FundamentalsTable) -> str:
    table.check_point_in_time()
    rows = [
        {"metric": metric, "cells": [format_value(q.metrics.get(metric)) for q in table.quarters]}
        for metric in table.metrics
    ]
    return render(
        "fundamentals_table.html",
        ticker=table.ticker,
        as_of=table.as_of.isoformat(),
        labels=[q.label for q in table.quarters],
        rows=rows,
    )


def load_filing_rows(csv_path: Path) -> list[FilingRow]:
    df = pd.read_csv(csv_path, dtype={"ticker": str, "metric": str})
    missing = set(FILING_COLUMNS) - set(df.columns)
    if missing:
        raise DataError(f"Fundamentals file [{csv_path}] is missing column(s): {', '.join(sorted(missing))}")
    try:
        period_end = pd.to_datetime(df["period_end"], format="%Y-%m-%d").dt.date
        filing_date = pd.to_datetime(df["filing_date"], format="%Y-%m-%d").dt.date
        values = pd.to_numeric(df["value"], errors="raise")
    except ValueError as e:
        raise DataError(f"Invalid fundamentals file [{csv_path}]: {e}") from e
    rows = [
        FilingRow(ticker=t, period_end=p, filing_date=f, metric=m, value=float(v))
        for t, p, f, m, v in zip(df["ticker"], period_end, filing_date, df["metric"], values)
        if pd.notna(v)
    ]
    logger.info("Loaded [%d] filing rows from: %s", len(rows), csv_path)
    return rows


def load_metric_definitions(json_path: Path | None = None) -> dict[str, str]:
    if json_path is None:
        with (resources.files("stockrater") / "resources" / "metric_definitions.json").open("r") as f:
            return json.load(f)
    with open(json_path, "r", encoding="utf-8") as f:
        try:
            definitions = json.load(f)
        except json.decoder.JSONDecodeError as e:
            raise ValueError(f"Failed to load metric definitions: {e}") from e
    if not isinstance(definitions, dict) or not all(isinstance(v, str) for v in definitions.values()):
        raise ValueError(f"Metric definitions in [{json_path}] must map metric names to descriptions")
    return definitions
