import json
import logging
import re
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from datetime import date
from enum import Enum, IntEnum
from importlib import resources
from pathlib import Path
from typing import Any

import pandas as pd

from stockrater.errors import UnknownTerm

logger = logging.getLogger(__name__)

REQUIRED_ROW_FIELDS = ("firm", "ticker", "date", "action", "term")
TOP_FIRMS = 5


class OrdinalRating(IntEnum):
    STRONG_SELL = -2
    MODERATE_SELL = -1
    HOLD = 0
    MODERATE_BUY = 1
    STRONG_BUY = 2

    @property
    def label(self) -> str:
        return self.name.replace("_", " ").title()


class RatingAction(str, Enum):
    maintain = "maintain"
    reiterate = "reiterate"
    upgrade = "upgrade"
    downgrade = "downgrade"
    initiate = "initiate"


# Abbreviations used by the Yahoo Finance upgrades/downgrades feed
ACTION_ALIASES = {
    "main": RatingAction.maintain,
    "reit": RatingAction.reiterate,
    "up": RatingAction.upgrade,
    "down": RatingAction.downgrade,
    "init": RatingAction.initiate,
}


@dataclass(frozen=True)
class CellRating:
    """A rating keyed by the <company, date, horizon> cell it is scored on."""
    company_id: str
    rating_date: date
    horizon: int
    rating: OrdinalRating


@dataclass(frozen=True)
class AnalystRatingEvent:
    firm: str
    company_id: str
    date: date
    action: RatingAction
    term: str
    rating: OrdinalRating

    def cell_ratings(self, horizons: Iterable[int]) -> list[CellRating]:
        # Analyst feeds carry no target date, so every horizon is scored
        return [CellRating(self.company_id, self.date, h, self.rating) for h in horizons]


@dataclass
class ActionSummary:
    total: int
    action_share: dict[str, float]
    firm_share: dict[str, float]
    top_firms_share: float


@dataclass
class AnalystIngestResult:
    events: list[AnalystRatingEvent] = field(default_factory=list)
    quarantined: list[tuple[dict[str, Any], str]] = field(default_factory=list)
    rejected: list[tuple[dict[str, Any], str]] = field(default_factory=list)
    summary: ActionSummary | None = None


def _normalise_term(term: str) -> str:
    return re.sub(r"[\s_-]+", " ", term).strip().lower()


def load_rating_synonyms(extra: Mapping[str, int] | None = None) -> dict[str, OrdinalRating]:
    path = resources.files("stockrater") / "resources" / "rating_synonyms.json"
    with path.open("r") as f:
        synonyms = {_normalise_term(k): OrdinalRating(v) for k, v in json.load(f).items()}
    for term, value in (extra or {}).items():
        synonyms[_normalise_term(term)] = OrdinalRating(value)
    return synonyms


DEFAULT_SYNONYMS = load_rating_synonyms()


def normalize_rating_term(term: str, synonyms: Mapping[str, OrdinalRating] | None = None) -> OrdinalRating:
    table = DEFAULT_SYNONYMS if synonyms is None else synonyms
    rating = table.get(_normalise_term(term))
    if rating is None:
        raise UnknownTerm(term)
    return rating


def summarise_actions(events: list[AnalystRatingEvent]) -> ActionSummary:
    total = len(events)
    actions = Counter(e.action.value for e in events)
    firms = Counter(e.firm for e in events)
    action_share = {a.value: (actions[a.value] / total if total else 0.0) for a in RatingAction}
    firm_share = {firm: count / total for firm, count in sorted(firms.items(), key=lambda kv: (-kv[1], kv[0]))}
    top_firms_share = sum(list(firm_share.values())[:TOP_FIRMS])
    return ActionSummary(total=total, action_share=action_share, firm_share=firm_share, top_firms_share=top_firms_share)


def ingest_analyst_ratings(rows: Iterable[Mapping[str, Any]], synonyms: Mapping[str, OrdinalRating] | None = None) -> AnalystIngestResult:
    """
    Normalises raw analyst rating rows. Every input row ends up in exactly one of events,
    quarantined (unknown rating term) or rejected (malformed row).
    """
    result = AnalystIngestResult()
    for raw_row in rows:
        row = {k: ("" if v is None else str(v).strip()) for k, v in raw_row.items()}
        missing = [f for f in REQUIRED_ROW_FIELDS if not row.get(f)]
        if missing:
            result.rejected.append((row, f"missing field(s): {', '.join(missing)}"))
            continue
        try:
            event_date = date.fromisoformat(row["date"][:10])
        except ValueError:
            result.rejected.append((row, f"invalid date: {row['date']}"))
            continue
        action_key = row["action"].lower()
        action = ACTION_ALIASES.get(action_key) or next((a for a in RatingAction if a.value == action_key), None)
        if action is None:
            result.rejected.append((row, f"unknown action: {row['action']}"))
            continue
        try:
            rating = normalize_rating_term(row["term"], synonyms)
        except UnknownTerm as e:
            logger.warning("Quarantined rating from [%s] for [%s]: %s", row["firm"], row["ticker"], e.message)
            result.quarantined.append((row, e.message))
            continue
        result.events.append(AnalystRatingEvent(
            firm=row["firm"],
            company_id=row["ticker"],
            date=event_date,
            action=action,
            term=row["term"],
            rating=rating,
        ))

    result.summary = summarise_actions(result.events)
    logger.info("Ingested [%d] analyst ratings, quarantined [%d], rejected [%d]", len(result.events), len(result.quarantined), len(result.rejected))
    return result


def load_analyst_rows(csv_path: Path) -> list[dict[str, Any]]:
    df = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    return df.to_dict(orient="records")


def write_quarantine(rows: list[tuple[dict[str, Any], str]], csv_path: Path) -> None:
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    records = [{**{f: row.get(f, "") for f in REQUIRED_ROW_FIELDS}, "reason": reason} for row, reason in rows]
    pd.DataFrame(records, columns=[*REQUIRED_ROW_FIELDS, "reason"]).to_csv(csv_path, index=False, lineterminator="\n")
