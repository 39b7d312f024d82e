import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from datetime import date
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any

from tabulate import tabulate

from stockrater.errors import ExtraInput, MissingInput
from stockrater.fundamentals import FundamentalsTable, render_fundamentals_html
from stockrater.gateway.parsing import expected_target_dates
from stockrater.market_data import Company, TechnicalSnapshot
from stockrater.news import ScopeKind, SentimentScore, Summary
from stockrater.ratings import DEFAULT_SYNONYMS, OrdinalRating
from stockrater.templates import render
from stockrater.utils import HORIZONS, digest, estimate_tokens

logger = logging.getLogger(__name__)

SNAPSHOT_ROWS = (
    ("Current price", "current_price", "price"),
    ("52-week low", "week52_min", "price"),
    ("52-week high", "week52_max", "price"),
    ("90-day volatility", "volatility_90d", "percent"),
    ("1-month return", "returns_1m", "percent"),
    ("3-month return", "returns_3m", "percent"),
    ("12-month return", "returns_12m", "percent"),
    ("1-month return vs market", "market_relative_1m", "percent"),
    ("3-month return vs market", "market_relative_3m", "percent"),
    ("12-month return vs market", "market_relative_12m", "percent"),
    ("1-month return vs sector", "sector_relative_1m", "percent"),
    ("3-month return vs sector", "sector_relative_3m", "percent"),
    ("12-month return vs sector", "sector_relative_12m", "percent"),
)


class MethodKind(str, Enum):
    vanilla = "vanilla"
    news = "news"
    sentiment = "sentiment"
    fundamentals = "fundamentals"
    fundamentals_sentiment = "fundamentals_sentiment"

    @property
    def uses_news(self) -> bool:
        return self is MethodKind.news

    @property
    def uses_sentiment(self) -> bool:
        return self in (MethodKind.sentiment, MethodKind.fundamentals_sentiment)

    @property
    def uses_fundamentals(self) -> bool:
        return self in (MethodKind.fundamentals, MethodKind.fundamentals_sentiment)


@dataclass(frozen=True)
class FewShotExample:
    ticker: str
    name: str
    rating_date: date
    snapshot_rows: tuple[tuple[str, str], ...]
    answer: dict[str, Any]

    @property
    def target_dates(self) -> dict[int, date]:
        return expected_target_dates(self.rating_date, HORIZONS)


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str
    expected_dates: dict[int, date]
    token_estimate: int
    input_digest: str
    max_input_date: date


def load_few_shot_example(json_path: Path | None = None) -> FewShotExample:
    if json_path is None:
        with (resources.files("stockrater") / "resources" / "few_shot_example.json").open("r") as f:
            data = json.load(f)
    else:
        with open(json_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    return FewShotExample(
        ticker=data["ticker"],
        name=data["name"],
        rating_date=date.fromisoformat(data["rating_date"]),
        snapshot_rows=tuple((label, value) for label, value in data["snapshot"]),
        answer=data["answer"],
    )


def _format_cell(value: float, kind: str) -> str:
    return f"{value:,.2f}" if kind == "price" else f"{value * 100:.2f}%"


def snapshot_rows(snapshot: TechnicalSnapshot) -> list[tuple[str, str]]:
    return [(label, _format_cell(getattr(snapshot, name), kind)) for label, name, kind in SNAPSHOT_ROWS]


def render_snapshot_table(rows: Sequence[tuple[str, str]]) -> str:
    return tabulate(rows, headers=["Indicator", "Value"], tablefmt="github", disable_numparse=True)


def _rating_scale(synonyms: Mapping[str, OrdinalRating]) -> list[dict[str, Any]]:
    scale = []
    for rating in sorted(OrdinalRating, reverse=True):
        terms = [t.title() for t, r in synonyms.items() if r == rating and t != rating.label.lower()]
        scale.append({"label": rating.label, "value": int(rating), "synonyms": terms})
    return scale


def build_system_prompt(method: MethodKind, metric_definitions: Mapping[str, str] | None = None,
                        synonyms: Mapping[str, OrdinalRating] | None = None, template_dir: Path | None = None) -> str:
    if method.uses_fundamentals and not metric_definitions:
        raise MissingInput(f"Method [{method.value}] needs metric definitions for its system prompt")
    return render(
        "rating_system.txt",
        template_dir,
        scale=_rating_scale(DEFAULT_SYNONYMS if synonyms is None else synonyms),
        uses_news=method.uses_news,
        uses_sentiment=method.uses_sentiment,
        metric_definitions=dict(metric_definitions or {}) if method.uses_fundamentals else {},
    )


def _check_inputs(method: MethodKind, news: Sequence[Summary] | None, sentiment: Sequence[SentimentScore] | None,
                  fundamentals: FundamentalsTable | None) -> None:
    supplied = {"news summaries": news is not None, "sentiment scores": sentiment is not None, "fundamentals table": fundamentals is not None}
    wanted = {"news summaries": method.uses_news, "sentiment scores": method.uses_sentiment, "fundamentals table": method.uses_fundamentals}
    for block, is_supplied in supplied.items():
        if is_supplied and not wanted[block]:
            raise ExtraInput(f"Method [{method.value}] does not take {block}")
        if wanted[block] and not is_supplied:
            raise MissingInput(f"Method [{method.value}] requires {block}")
    if news is not None and not any(s.scope.kind == ScopeKind.company for s in news):
        raise MissingInput(f"Method [{method.value}] requires a company news summary")
    if sentiment is not None:
        kinds = sorted(s.scope.kind.value for s in sentiment)
        if kinds != [ScopeKind.company.value, ScopeKind.sector.value]:
            raise MissingInput(f"Method [{method.value}] requires exactly one company and one sector sentiment score, got {kinds}")


def build_user_prompt(method: MethodKind, company: Company, rating_date: date, snapshot: TechnicalSnapshot,
                      news: Sequence[Summary] | None = None, sentiment: Sequence[SentimentScore] | None = None,
                      fundamentals: FundamentalsTable | None = None, few_shot: FewShotExample | None = None,
                      horizons: Sequence[int] = HORIZONS, system: str | None = None, template_dir: Path | None = None) -> PromptBundle:
    """
    Renders the user prompt with text blocks ahead of tables: task and dates, the few-shot
    example, news or sentiment lines, the fundamentals table and finally the technical snapshot.
    """
    _check_inputs(method, news, sentiment, fundamentals)
    expected_dates = expected_target_dates(rating_date, horizons)

    ordered_news = sorted(news or [], key=lambda s: (s.scope.kind != ScopeKind.company, s.scope.key))
    ordered_sentiment = sorted(sentiment or [], key=lambda s: s.scope.kind != ScopeKind.company)
    fundamentals_html = render_fundamentals_html(fundamentals) if fundamentals is not None else None
    rows = snapshot_rows(snapshot)

    user = render(
        "rating_user.txt",
        template_dir,
        company=company,
        rating_date=rating_date.isoformat(),
        expected_dates=[(h, d.isoformat()) for h, d in sorted(expected_dates.items())],
        few_shot=_few_shot_context(few_shot) if few_shot is not None else None,
        news=[{"scope": s.scope.kind.value, "month": s.month, "text": s.text} for s in ordered_news],
        sentiment=[{"scope": s.scope.kind.value, "month": s.month, "score": s.score} for s in ordered_sentiment],
        fundamentals_html=fundamentals_html,
        snapshot_table=render_snapshot_table(rows),
    )
    system = system if system is not None else build_system_prompt(method, fundamentals.metric_definitions if fundamentals else None,
                                                                    template_dir=template_dir)

    input_dates = [snapshot.price_date]
    input_dates += [s.max_input_date for s in ordered_news if s.max_input_date is not None]
    input_dates += [s.max_input_date for s in ordered_sentiment if s.max_input_date is not None]
    if fundamentals is not None and fundamentals.max_input_date is not None:
        input_dates.append(fundamentals.max_input_date)

    input_digest = digest({
        "method": method.value,
        "company": company.ticker,
        "rating_date": rating_date.isoformat(),
        "snapshot": list(snapshot.values()),
        "news": [[s.scope.kind.value, s.month, s.source_digest] for s in ordered_news],
        "sentiment": [[s.scope.kind.value, s.month, s.score] for s in ordered_sentiment],
        "fundamentals": fundamentals_html,
        "few_shot": few_shot is not None,
        "horizons": list(horizons),
    })
    return PromptBundle(
        system=system,
        user=user,
        expected_dates=expected_dates,
        token_estimate=estimate_tokens(len(system) + len(user)),
        input_digest=input_digest,
        max_input_date=max(input_dates),
    )


def _few_shot_context(example: FewShotExample) -> dict[str, Any]:
    return {
        "name": example.name,
        "ticker": example.ticker,
        "rating_date": example.rating_date.isoformat(),
        "target_dates": ", ".join(f"{h}m {d.isoformat()}" for h, d in sorted(example.target_dates.items())),
        "snapshot_table": render_snapshot_table(example.snapshot_rows),
        "answer": "```json\n" + json.dumps(example.answer, indent=2) + "\n```",
    }
