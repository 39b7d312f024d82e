import calendar
import hashlib
import json
import math
from datetime import date
from typing import Any

from stockrater.config import YEAR_MONTH_RE

HORIZONS: tuple[int, ...] = (1, 3, 6, 12, 18)


def add_months(d: date, months: int) -> date:
    """
    Calendar-month addition: same day-of-month, clamped to the end of the target month.
    Negative values step backwards.
    """
    month_index = d.year * 12 + (d.month - 1) + months
    year, month = divmod(month_index, 12)
    month += 1
    day = min(d.day, calendar.monthrange(year, month)[1])
    return date(year, month, day)


def parse_year_month(value: str) -> date:
    match = YEAR_MONTH_RE.fullmatch(value)
    if not match:
        raise ValueError(f"Invalid year-month [{value}], expected YYYY-MM")
    return date(int(match["year"]), int(match["month"]), 1)


def year_month(d: date) -> str:
    return f"{d.year:04d}-{d.month:02d}"


def month_starts(start: date, end: date) -> list[date]:
    """First calendar day of every month from start to end inclusive."""
    months = []
    current = date(start.year, start.month, 1)
    last = date(end.year, end.month, 1)
    while current <= last:
        months.append(current)
        current = add_months(current, 1)
    return months


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)


def digest(obj: Any) -> str:
    payload = obj if isinstance(obj, str) else canonical_json(obj)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def estimate_tokens(chars: int) -> int:
    # Roughly four characters per token for English text
    return math.ceil(chars / 4)
