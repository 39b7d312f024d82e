import logging
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import date
from itertools import combinations
from typing import Any, NamedTuple

import numpy as np
from scipy import stats

from stockrater.errors import Degenerate, EmptyInput, LengthMismatch, MissingHorizon
from stockrater.gateway.models import PredictionRecord
from stockrater.labeler import LabelMode, QuantileLabel, rating_correct
from stockrater.ratings import CellRating, OrdinalRating
from stockrater.utils import year_month

logger = logging.getLogger(__name__)

COMPOSITE_HORIZONS = (3, 6, 12)
SENTIMENT_ASSESSMENT_VALUES = {"positive": 1, "neutral": 0, "mixed": 0, "negative": -1}
ANALYST_METHOD = "analyst"


class MaeResult(NamedTuple):
    mean: float
    std: float
    n: int


def mae(predictions: Sequence[int], truths: Sequence[int]) -> MaeResult:
    if len(predictions) != len(truths):
        raise LengthMismatch(f"Got [{len(predictions)}] predictions for [{len(truths)}] truths")
    if not predictions:
        raise EmptyInput("MAE needs at least one prediction")
    errors = np.abs(np.asarray(predictions, dtype=np.int64) - np.asarray(truths, dtype=np.int64))
    n = len(errors)
    mean = float(errors.sum()) / n
    std = float(np.std(errors, ddof=1)) if n > 1 else 0.0
    return MaeResult(mean, std, n)


def composite_error(per_horizon: Mapping[int, float]) -> float:
    missing = [h for h in COMPOSITE_HORIZONS if h not in per_horizon]
    if missing:
        raise MissingHorizon(f"Composite error needs horizon(s) {', '.join(str(h) for h in missing)}")
    return sum(per_horizon[h] for h in COMPOSITE_HORIZONS) / len(COMPOSITE_HORIZONS)


@dataclass(frozen=True)
class RatingDistribution:
    counts: dict[int, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def proportions(self) -> dict[int, float]:
        total = self.total
        return {r: (c / total if total else 0.0) for r, c in self.counts.items()}


def rating_distribution(ratings: Iterable[int]) -> RatingDistribution:
    counts = {int(r): 0 for r in sorted(OrdinalRating)}
    for rating in ratings:
        counts[int(OrdinalRating(rating))] += 1
    return RatingDistribution(counts)


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation using average ranks for ties. Undefined, so Degenerate, when either side is constant."""
    if len(xs) != len(ys):
        raise LengthMismatch(f"Got [{len(xs)}] x values for [{len(ys)}] y values")
    if len(xs) < 2:
        raise EmptyInput("Spearman correlation needs at least two pairs")
    x, y = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise Degenerate("Spearman correlation is undefined for a constant input")
    rho, _ = stats.spearmanr(x, y)
    return float(rho)


@dataclass(frozen=True)
class ScoredCell:
    company_id: str
    rating_date: date
    horizon: int
    mode: LabelMode
    prediction: OrdinalRating
    truth: OrdinalRating
    correct: bool

    @property
    def month(self) -> str:
        return year_month(self.rating_date)


def join_labels(ratings: Iterable[CellRating], labels: Iterable[QuantileLabel]) -> list[ScoredCell]:
    """Pairs every rating with the label of its cell in each mode; ratings without a label are left out."""
    by_key = {(label.company_id, label.rating_date, label.horizon, label.mode): label for label in labels}
    modes = sorted({key[3] for key in by_key}, key=lambda m: m.value)
    scored = []
    for rating in ratings:
        for mode in modes:
            label = by_key.get((rating.company_id, rating.rating_date, rating.horizon, mode))
            if label is None:
                continue
            scored.append(ScoredCell(
                company_id=rating.company_id,
                rating_date=rating.rating_date,
                horizon=rating.horizon,
                mode=mode,
                prediction=rating.rating,
                truth=label.ground_truth_rating,
                correct=rating_correct(rating, label),
            ))
    return sorted(scored, key=lambda c: (c.mode.value, c.horizon, c.rating_date, c.company_id, int(c.prediction)))


@dataclass(frozen=True)
class HorizonScore:
    mae: float
    std: float
    n: int
    hit_rate: float


def _group(cells: Iterable[ScoredCell], key) -> dict[Any, list[ScoredCell]]:
    groups: dict[Any, list[ScoredCell]] = defaultdict(list)
    for cell in cells:
        groups[key(cell)].append(cell)
    return groups


def per_horizon_scores(cells: Sequence[ScoredCell]) -> dict[tuple[int, LabelMode], HorizonScore]:
    scores = {}
    for key, group in sorted(_group(cells, lambda c: (c.horizon, c.mode)).items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        result = mae([int(c.prediction) for c in group], [int(c.truth) for c in group])
        scores[key] = HorizonScore(result.mean, result.std, result.n, sum(c.correct for c in group) / len(group))
    return scores


def monthly_breakdown(ratings: Iterable[CellRating], labels: Iterable[QuantileLabel]) -> dict[tuple[str, int, LabelMode], MaeResult]:
    """MAE per (rating month, horizon, mode). Cells without a label, e.g. past the end of the price data, are absent."""
    cells = join_labels(ratings, labels)
    return {
        key: mae([int(c.prediction) for c in group], [int(c.truth) for c in group])
        for key, group in sorted(_group(cells, lambda c: (c.month, c.horizon, c.mode)).items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2].value))
    }


@dataclass
class MethodScores:
    per_horizon: dict[tuple[int, LabelMode], HorizonScore] = field(default_factory=dict)
    composite: dict[LabelMode, float | None] = field(default_factory=dict)
    monthly: dict[tuple[str, int, LabelMode], MaeResult] = field(default_factory=dict)
    distribution: RatingDistribution = field(default_factory=lambda: rating_distribution([]))


def score_method(ratings: Sequence[CellRating], labels: Sequence[QuantileLabel],
                 distribution_of: Iterable[int] | None = None) -> MethodScores:
    per_horizon = per_horizon_scores(join_labels(ratings, labels))
    composite: dict[LabelMode, float | None] = {}
    for mode in LabelMode:
        maes = {h: s.mae for (h, m), s in per_horizon.items() if m == mode}
        try:
            composite[mode] = composite_error(maes)
        except MissingHorizon as e:
            logger.info("No composite error for [%s] labels: %s", mode.value, e.message)
            composite[mode] = None
    return MethodScores(
        per_horizon=per_horizon,
        composite=composite,
        monthly=monthly_breakdown(ratings, labels),
        distribution=rating_distribution(distribution_of if distribution_of is not None else (r.rating for r in ratings)),
    )


@dataclass(frozen=True)
class Correlation:
    method: str
    x: str
    y: str
    rho: float | None
    n: int


def _correlate(method: str, x_name: str, y_name: str, pairs: Sequence[tuple[float, float]]) -> Correlation:
    try:
        rho = spearman([p[0] for p in pairs], [p[1] for p in pairs])
    except (Degenerate, EmptyInput) as e:
        logger.info("No correlation for [%s] %s vs %s: %s", method, x_name, y_name, e.message)
        rho = None
    return Correlation(method, x_name, y_name, rho, len(pairs))


def correlations(method: str, records: Sequence[PredictionRecord],
                 sentiment_inputs: Mapping[tuple[str, date], Mapping[str, int]] | None = None) -> list[Correlation]:
    """
    Sentiment inputs and the model's own sentiment assessment against the rating at each horizon,
    then ratings against each other across every pair of horizons.
    """
    if not records:
        return []
    horizons = sorted({e.horizon for r in records for e in r.entries})
    sentiment_inputs = sentiment_inputs or {}
    input_names = sorted({name for scores in sentiment_inputs.values() for name in scores})
    results = []
    for horizon in horizons:
        for name in input_names:
            pairs = [(sentiment_inputs[(r.company_id, r.rating_date)][name], int(r.entry(horizon).rating))
                     for r in records if name in sentiment_inputs.get((r.company_id, r.rating_date), {})]
            results.append(_correlate(method, name, f"rating_{horizon}m", pairs))
        assessed = [(SENTIMENT_ASSESSMENT_VALUES[r.sentiment_assessment], int(r.entry(horizon).rating))
                    for r in records if r.sentiment_assessment is not None]
        if assessed:
            results.append(_correlate(method, "sentiment_assessment", f"rating_{horizon}m", assessed))
    for first, second in combinations(horizons, 2):
        pairs = [(int(r.entry(first).rating), int(r.entry(second).rating)) for r in records]
        results.append(_correlate(method, f"rating_{first}m", f"rating_{second}m", pairs))
    return results


@dataclass(frozen=True)
class SkippedCell:
    rating_date: date
    horizon: int
    mode: LabelMode
    reason: str


@dataclass
class EvaluationReport:
    config_digest: str = ""
    methods: dict[str, MethodScores] = field(default_factory=dict)
    correlations: list[Correlation] = field(default_factory=list)
    skipped: list[SkippedCell] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config_digest": self.config_digest,
            "methods": {name: _scores_to_dict(scores) for name, scores in sorted(self.methods.items())},
            "correlations": [
                {"method": c.method, "x": c.x, "y": c.y, "rho": c.rho, "n": c.n} for c in self.correlations
            ],
            "skipped": [
                {"rating_date": s.rating_date.isoformat(), "horizon_months": s.horizon, "mode": s.mode.value, "reason": s.reason}
                for s in self.skipped
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EvaluationReport":
        return cls(
            config_digest=data.get("config_digest", ""),
            methods={name: _scores_from_dict(scores) for name, scores in data.get("methods", {}).items()},
            correlations=[Correlation(c["method"], c["x"], c["y"], c["rho"], c["n"]) for c in data.get("correlations", [])],
            skipped=[
                SkippedCell(date.fromisoformat(s["rating_date"]), s["horizon_months"], LabelMode(s["mode"]), s["reason"])
                for s in data.get("skipped", [])
            ],
        )


def _scores_to_dict(scores: MethodScores) -> dict[str, Any]:
    distribution = scores.distribution
    return {
        "per_horizon": [
            {"horizon_months": h, "mode": m.value, "mae": s.mae, "std": s.std, "n": s.n, "hit_rate": s.hit_rate}
            for (h, m), s in scores.per_horizon.items()
        ],
        "composite": {m.value: value for m, value in scores.composite.items()},
        "monthly": [
            {"month": month, "horizon_months": h, "mode": m.value, "mae": r.mean, "std": r.std, "n": r.n}
            for (month, h, m), r in scores.monthly.items()
        ],
        "distribution": {str(r): c for r, c in distribution.counts.items()},
    }


def _scores_from_dict(data: dict[str, Any]) -> MethodScores:
    return MethodScores(
        per_horizon={
            (row["horizon_months"], LabelMode(row["mode"])): HorizonScore(row["mae"], row["std"], row["n"], row["hit_rate"])
            for row in data.get("per_horizon", [])
        },
        composite={LabelMode(m): value for m, value in data.get("composite", {}).items()},
        monthly={
            (row["month"], row["horizon_months"], LabelMode(row["mode"])): MaeResult(row["mae"], row["std"], row["n"])
            for row in data.get("monthly", [])
        },
        distribution=RatingDistribution({int(r): c for r, c in data.get("distribution", {}).items()}),
    )
