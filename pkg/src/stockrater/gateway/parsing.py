import json
import logging
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from datetime import date, datetime

import jsonschema
from jsonschema import ValidationError

from stockrater.config import PREDICTION_SCHEMA
from stockrater.errors import MalformedResponse, UnknownTerm
from stockrater.gateway.models import SENTIMENT_LABELS, HorizonPrediction, PredictionRecord
from stockrater.ratings import DEFAULT_SYNONYMS, OrdinalRating, normalize_rating_term
from stockrater.utils import add_months, digest

logger = logging.getLogger(__name__)

FENCED_BLOCK_RE = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.DOTALL)
ISO_DATE_RE = re.compile(r"\b(\d{4}-\d{2}-\d{2})\b")
MONTH_YEAR_RE = re.compile(r"\b(January|February|March|April|May|June|July|August|September|October|November|December)\s+(\d{4})\b", re.IGNORECASE)
PRICE_TARGET_RE = re.compile(r"\$\s?(\d[\d,]*(?:\.\d+)?)")
SENTIMENT_RE = re.compile(r"\bsentiment\b[^.\n]*?\b(positive|negative|neutral|mixed)\b", re.IGNORECASE)


@dataclass(frozen=True)
class DateMismatch:
    """Horizons whose restated target date differs from rating date + horizon months."""
    horizons: tuple[int, ...]
    expected: dict[int, date]
    actual: dict[int, date]

    def describe(self) -> str:
        return ", ".join(f"{h}m expected {self.expected[h]} got {self.actual[h]}" for h in self.horizons)


def expected_target_dates(rating_date: date, horizons: Sequence[int]) -> dict[int, date]:
    return {h: add_months(rating_date, h) for h in horizons}


def render_prediction_block(record: PredictionRecord) -> str:
    payload = {
        "predictions": [
            {
                "horizon_months": e.horizon,
                "target_date": e.target_date.isoformat(),
                "rating": e.rating.label,
                "price_target": e.price_target,
            }
            for e in sorted(record.entries, key=lambda e: e.horizon)
        ],
        "explanation": record.explanation,
    }
    if record.sentiment_assessment is not None:
        payload = {"sentiment_assessment": record.sentiment_assessment, **payload}
    return "```json\n" + json.dumps(payload, indent=2) + "\n```"


def parse_prediction(response: str, company_id: str, rating_date: date, expected_dates: Mapping[int, date],
                     synonyms: Mapping[str, OrdinalRating] | None = None) -> PredictionRecord:
    """
    Parses the fenced JSON answer block, falling back to free-text extraction when the model
    ignored the format instructions. Raises MalformedResponse with the raw text preserved.
    """
    horizons = tuple(sorted(expected_dates))
    match = FENCED_BLOCK_RE.search(response)
    if match:
        entries, explanation, sentiment = _parse_block(match.group(1), response, horizons, synonyms)
    else:
        logger.debug("No fenced answer block for [%s] on [%s], so using free-text extraction", company_id, rating_date)
        entries, explanation, sentiment = _parse_free_text(response, expected_dates, synonyms)

    missing = [h for h in horizons if h not in entries]
    if missing:
        raise MalformedResponse(f"Response is missing horizon(s) {', '.join(str(h) for h in missing)}", response)

    return PredictionRecord(
        company_id=company_id,
        rating_date=rating_date,
        entries=tuple(entries[h] for h in horizons),
        explanation=explanation,
        sentiment_assessment=sentiment,
        response_digest=digest(response),
        horizons=horizons,
    )


def _parse_block(block: str, response: str, horizons: Sequence[int],
                 synonyms: Mapping[str, OrdinalRating] | None) -> tuple[dict[int, HorizonPrediction], str, str | None]:
    try:
        payload = json.loads(block)
        jsonschema.validate(instance=payload, schema=PREDICTION_SCHEMA)
    except json.decoder.JSONDecodeError as e:
        raise MalformedResponse(f"Answer block is not valid JSON: {e}", response) from e
    except ValidationError as e:
        raise MalformedResponse(f"Answer block does not match the expected format: {e.message}", response) from e

    entries = {}
    for item in payload["predictions"]:
        horizon = item["horizon_months"]
        if horizon not in horizons:
            continue
        try:
            rating = normalize_rating_term(item["rating"], synonyms)
        except UnknownTerm as e:
            raise MalformedResponse(f"Horizon {horizon} has an unknown rating term [{e.term}]", response) from e
        entries[horizon] = HorizonPrediction(
            horizon=horizon,
            target_date=date.fromisoformat(item["target_date"]),
            rating=rating,
            price_target=item.get("price_target"),
        )
    return entries, payload.get("explanation", ""), payload.get("sentiment_assessment")


def _parse_free_text(response: str, expected_dates: Mapping[int, date],
                     synonyms: Mapping[str, OrdinalRating] | None) -> tuple[dict[int, HorizonPrediction], str, str | None]:
    table = DEFAULT_SYNONYMS if synonyms is None else synonyms
    # Longest terms first so "strong buy" wins over "buy"
    terms = sorted(table, key=len, reverse=True)
    term_re = re.compile(r"\b(" + "|".join(re.escape(t).replace(r"\ ", r"[\s_-]+") for t in terms) + r")\b", re.IGNORECASE)

    lines = response.splitlines()
    entries = {}
    for horizon, expected in expected_dates.items():
        horizon_re = re.compile(rf"\b{horizon}[\s-]*months?\b", re.IGNORECASE)
        for line in lines:
            if not (horizon_re.search(line) or expected.isoformat() in line):
                continue
            term = _rating_term(term_re, line)
            if term is None:
                continue
            entries[horizon] = HorizonPrediction(
                horizon=horizon,
                target_date=_date_in_line(line, expected),
                rating=normalize_rating_term(term, table),
                price_target=_price_in_line(line),
            )
            break

    sentiment_match = SENTIMENT_RE.search(response)
    sentiment = sentiment_match.group(1).lower() if sentiment_match else None
    if sentiment not in SENTIMENT_LABELS:
        sentiment = None
    return entries, response.strip(), sentiment


def _rating_term(term_re: re.Pattern[str], line: str) -> str | None:
    # Sentiment words double as ratings ("positive", "neutral"); a real rating term on the line outranks them
    found = [m.group(1) for m in term_re.finditer(line)]
    ratings = [t for t in found if t.lower() not in SENTIMENT_LABELS]
    if ratings:
        return ratings[0]
    return found[0] if found else None


def _date_in_line(line: str, expected: date) -> date:
    iso = ISO_DATE_RE.search(line)
    if iso:
        try:
            return date.fromisoformat(iso.group(1))
        except ValueError:
            pass
    month_year = MONTH_YEAR_RE.search(line)
    if month_year:
        mentioned = datetime.strptime(f"{month_year.group(1)} {month_year.group(2)}", "%B %Y").date()
        if (mentioned.year, mentioned.month) == (expected.year, expected.month):
            return expected
        return mentioned
    # Not restated; date.min never equals a target date, so CoVE flags it
    return date.min


def _price_in_line(line: str) -> float | None:
    match = PRICE_TARGET_RE.search(line)
    return float(match.group(1).replace(",", "")) if match else None


def verify_dates_cove(record: PredictionRecord, rating_date: date) -> DateMismatch | None:
    expected = expected_target_dates(rating_date, [e.horizon for e in record.entries])
    actual = {e.horizon: e.target_date for e in record.entries}
    wrong = tuple(sorted(h for h in expected if actual[h] != expected[h]))
    if wrong:
        return DateMismatch(horizons=wrong, expected=expected, actual=actual)
    return None
