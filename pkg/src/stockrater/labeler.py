import logging
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path

import pandas as pd

from stockrater.errors import DataError, KeyMismatch, OutOfRange, TooFewCompanies
from stockrater.market_data import PriceSeries, Universe, compute_relative_return, compute_return
from stockrater.ratings import CellRating, OrdinalRating

logger = logging.getLogger(__name__)

QUINTILES = 5
LABEL_COLUMNS = ["company", "rating_date", "horizon_months", "mode", "quintile", "truth_rating"]


class LabelMode(str, Enum):
    absolute = "absolute"
    sector_relative = "sector-relative"


@dataclass(frozen=True)
class QuantileLabel:
    company_id: str
    rating_date: date
    horizon: int
    mode: LabelMode
    quintile: int

    def __post_init__(self) -> None:
        if not 0 <= self.quintile < QUINTILES:
            raise OutOfRange(f"Quintile [{self.quintile}] is outside 0..{QUINTILES - 1}")

    @property
    def ground_truth_rating(self) -> OrdinalRating:
        return quantile_to_rating(self.quintile)


@dataclass
class LabelResult:
    labels: list[QuantileLabel] = field(default_factory=list)
    excluded: dict[str, str] = field(default_factory=dict)


def assign_quantiles(returns: Mapping[str, float], k: int = QUINTILES) -> dict[str, int]:
    """
    Rank-based bucketing: the company at 0-based rank r of n (ascending by return, then id)
    falls in bucket floor(r * k / n).
    """
    finite = {c: r for c, r in returns.items() if r is not None and math.isfinite(r)}
    n = len(finite)
    if n < k:
        raise TooFewCompanies(n, k)
    ranked = sorted(finite.items(), key=lambda item: (item[1], item[0]))
    return {company: (rank * k) // n for rank, (company, _) in enumerate(ranked)}


def quantile_to_rating(quintile: int) -> OrdinalRating:
    if not 0 <= quintile < QUINTILES:
        raise OutOfRange(f"Quintile [{quintile}] is outside 0..{QUINTILES - 1}")
    return OrdinalRating(quintile - 2)


def label_universe(prices: Mapping[str, PriceSeries], universe: Universe, rating_date: date, horizon: int, mode: LabelMode,
                   max_roll_days: int = 7, k: int = QUINTILES) -> LabelResult:
    result = LabelResult()
    returns: dict[str, float] = {}
    for company in universe.companies:
        try:
            series = prices.get(company.ticker)
            if series is None:
                raise DataError(f"No prices for [{company.ticker}]")
            company_return = compute_return(series, rating_date, horizon, max_roll_days)
            if mode == LabelMode.sector_relative:
                sector_id = universe.sector_index_ids[company.sector]
                sector_series = prices.get(sector_id)
                if sector_series is None:
                    raise DataError(f"No prices for sector index [{sector_id}]")
                company_return = compute_relative_return(company_return, compute_return(sector_series, rating_date, horizon, max_roll_days))
            returns[company.ticker] = company_return
        except DataError as e:
            result.excluded[company.ticker] = e.message

    if result.excluded:
        logger.debug("Excluded [%d] companies from labels for [%s] +%dm %s", len(result.excluded), rating_date, horizon, mode.value)

    quintiles = assign_quantiles(returns, k)
    result.labels = [
        QuantileLabel(company_id=ticker, rating_date=rating_date, horizon=horizon, mode=mode, quintile=quintiles[ticker])
        for ticker in sorted(quintiles)
    ]
    return result


def rating_correct(rating: CellRating, label: QuantileLabel) -> bool:
    if (rating.company_id, rating.rating_date, rating.horizon) != (label.company_id, label.rating_date, label.horizon):
        raise KeyMismatch(
            f"Rating for [{rating.company_id}, {rating.rating_date}, {rating.horizon}m] does not match label "
            f"[{label.company_id}, {label.rating_date}, {label.horizon}m]"
        )
    return rating.rating == label.ground_truth_rating


def export_labels(labels: Iterable[QuantileLabel], csv_path: Path) -> None:
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    records = [
        [label.company_id, label.rating_date.isoformat(), label.horizon, label.mode.value, label.quintile, int(label.ground_truth_rating)]
        for label in labels
    ]
    pd.DataFrame(records, columns=LABEL_COLUMNS).to_csv(csv_path, index=False, lineterminator="\n")
