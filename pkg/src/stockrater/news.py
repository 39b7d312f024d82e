import json
import logging
import math
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Protocol

from stockrater.errors import DataError, EmptyBundle, UnparsableSentiment
from stockrater.gateway.backends import ChatGateway
from stockrater.gateway.models import Purpose
from stockrater.templates import render
from stockrater.utils import digest, estimate_tokens, year_month

logger = logging.getLogger(__name__)

SENTIMENT_MIN = -5
SENTIMENT_MAX = 5
NUMBER_RE = re.compile(r"[-+]?\d+(?:\.\d+)?")
NUMBER_LINE_RE = re.compile(r"\s*([-+]?\d+(?:\.\d+)?)\.?\s*")
# "-5 to 5", "3 out of 5": numbers that restate the scale rather than score it
SCALE_RE = re.compile(r"[-+]?\d+\s*(?:to|through)\s*[-+]?\d+|(?:out of|/)\s*\d+", re.IGNORECASE)


class ScopeKind(str, Enum):
    company = "company"
    sector = "sector"


@dataclass(frozen=True)
class NewsScope:
    kind: ScopeKind
    key: str

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.key}"


@dataclass(frozen=True)
class Article:
    published: date
    url: str
    title: str
    body: str
    ticker_hint: str | None = None

    @property
    def missing(self) -> bool:
        return not self.body.strip()

    def fingerprint(self) -> tuple[str, str, str]:
        return self.url, self.title, self.published.isoformat()


@dataclass(frozen=True)
class BundleStats:
    article_count: int = 0
    char_count: int = 0
    token_estimate: int = 0
    url_count: int = 0
    missing_count: int = 0


@dataclass(frozen=True)
class NewsBundle:
    scope: NewsScope
    month: str
    articles: tuple[Article, ...] = ()
    stats: BundleStats = field(default_factory=BundleStats)

    def digest(self) -> str:
        return digest({
            "scope": str(self.scope),
            "month": self.month,
            "articles": [[a.published.isoformat(), a.url, a.title, a.body] for a in self.articles],
        })

    @property
    def max_published(self) -> date | None:
        return max((a.published for a in self.articles), default=None)


@dataclass(frozen=True)
class Summary:
    scope: NewsScope
    month: str
    text: str
    source_digest: str
    max_input_date: date | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"Summary for [{self.scope}] {self.month} must not be empty")

    def to_dict(self) -> dict:
        return {
            "scope": self.scope.kind.value,
            "key": self.scope.key,
            "month": self.month,
            "text": self.text,
            "digest": self.source_digest,
            "max_input_date": self.max_input_date.isoformat() if self.max_input_date else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Summary":
        max_input_date = data.get("max_input_date")
        return cls(
            scope=NewsScope(ScopeKind(data["scope"]), data["key"]),
            month=data["month"],
            text=data["text"],
            source_digest=data["digest"],
            max_input_date=date.fromisoformat(max_input_date) if max_input_date else None,
        )


@dataclass(frozen=True)
class SentimentScore:
    scope: NewsScope
    month: str
    score: int
    source_digest: str = ""
    max_input_date: date | None = None

    def __post_init__(self) -> None:
        if not SENTIMENT_MIN <= self.score <= SENTIMENT_MAX:
            raise ValueError(f"Sentiment score [{self.score}] is outside [{SENTIMENT_MIN}, {SENTIMENT_MAX}]")

    def to_dict(self) -> dict:
        return {
            "scope": self.scope.kind.value,
            "key": self.scope.key,
            "month": self.month,
            "score": self.score,
            "digest": self.source_digest,
            "max_input_date": self.max_input_date.isoformat() if self.max_input_date else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SentimentScore":
        max_input_date = data.get("max_input_date")
        return cls(NewsScope(ScopeKind(data["scope"]), data["key"]), data["month"], data["score"], data.get("digest", ""),
                   date.fromisoformat(max_input_date) if max_input_date else None)


class RelevanceMatcher(Protocol):
    def is_relevant(self, article: Article, company_name: str, aliases: Sequence[str]) -> bool:
        ...


class LexicalMatcher:
    """
    Whole-token, case-insensitive matching of the company name or any alias in the title or
    body. It cannot tell "Apple" the company from the fruit; swap in an NER-backed matcher
    where that matters.
    """

    def is_relevant(self, article: Article, company_name: str, aliases: Sequence[str]) -> bool:
        text = f"{article.title}\n{article.body}"
        return any(_token_pattern(term).search(text) for term in (company_name, *aliases) if term.strip())


def _token_pattern(term: str) -> re.Pattern[str]:
    return re.compile(rf"(?<!\w){re.escape(term.strip())}(?!\w)", re.IGNORECASE)


def filter_relevant_articles(articles: Iterable[Article], company_name: str, aliases: Sequence[str] = (),
                             matcher: RelevanceMatcher | None = None) -> list[Article]:
    matcher = matcher or LexicalMatcher()
    return [a for a in articles if matcher.is_relevant(a, company_name, aliases)]


def aggregate_monthly(articles: Iterable[Article], scope: NewsScope, month: str) -> NewsBundle:
    selected = tuple(sorted(
        (a for a in articles if year_month(a.published) == month),
        key=lambda a: (a.published, a.url, a.title),
    ))
    char_count = sum(len(a.body) for a in selected)
    stats = BundleStats(
        article_count=len(selected),
        char_count=char_count,
        token_estimate=estimate_tokens(char_count),
        url_count=len({a.url for a in selected if a.url}),
        missing_count=sum(1 for a in selected if a.missing),
    )
    return NewsBundle(scope=scope, month=month, articles=selected, stats=stats)


def pool_sector_articles(relevant_by_ticker: Mapping[str, Iterable[Article]], tickers: Iterable[str]) -> list[Article]:
    pooled: dict[tuple[str, str, str], Article] = {}
    for ticker in tickers:
        for article in relevant_by_ticker.get(ticker, ()):
            pooled.setdefault(article.fingerprint(), article)
    return list(pooled.values())


def summarize(bundle: NewsBundle, gateway: ChatGateway, subject: str, template_dir: Path | None = None,
              max_articles_per_call: int | None = None) -> Summary:
    """
    Summarises a monthly bundle. Bundles over the context budget are split by article count,
    each chunk is summarised, then the chunk summaries are summarised in one final call.
    """
    readable = [a for a in bundle.articles if not a.missing]
    if not readable:
        raise EmptyBundle(f"No articles to summarise for [{bundle.scope}] {bundle.month}")

    system = render("summary_system.txt", template_dir)
    chunk_size = _chunk_size(readable, gateway.settings.context_budget_tokens, max_articles_per_call)

    def _user_prompt(articles: Sequence[Article] | None = None, partials: Sequence[str] | None = None) -> str:
        return render(
            "summary_user.txt",
            template_dir,
            scope=bundle.scope.kind.value,
            subject=subject,
            month=bundle.month,
            articles=articles or [],
            partials=partials or [],
        )

    if chunk_size >= len(readable):
        text = gateway.chat(system, _user_prompt(articles=readable), Purpose.summary)
    else:
        chunks = [readable[i:i + chunk_size] for i in range(0, len(readable), chunk_size)]
        logger.info("Bundle for [%s] %s exceeds the context budget, so summarising [%d] chunks of up to [%d] articles",
                    bundle.scope, bundle.month, len(chunks), chunk_size)
        partials = [gateway.chat(system, _user_prompt(articles=chunk), Purpose.summary) for chunk in chunks]
        text = gateway.chat(system, _user_prompt(partials=partials), Purpose.summary)

    return Summary(scope=bundle.scope, month=bundle.month, text=text.strip(), source_digest=bundle.digest(), max_input_date=bundle.max_published)


def _chunk_size(articles: Sequence[Article], budget_tokens: int, max_articles_per_call: int | None) -> int:
    size = len(articles)
    if max_articles_per_call is not None:
        size = min(size, max_articles_per_call)
    total_tokens = estimate_tokens(sum(len(a.title) + len(a.body) for a in articles))
    if total_tokens > budget_tokens:
        per_article = total_tokens / len(articles)
        size = min(size, max(1, math.floor(budget_tokens / per_article)))
    return size


def parse_sentiment(reply: str) -> int | None:
    """A line holding only a number wins; otherwise the last number outside any restated scale."""
    text = reply.replace("−", "-")
    bare = [m.group(1) for m in map(NUMBER_LINE_RE.fullmatch, text.splitlines()) if m]
    candidates = bare or NUMBER_RE.findall(SCALE_RE.sub(" ", text))
    if not candidates or "." in candidates[-1]:
        return None
    value = int(candidates[-1])
    return value if SENTIMENT_MIN <= value <= SENTIMENT_MAX else None


def score_sentiment(summary: Summary, gateway: ChatGateway, subject: str, template_dir: Path | None = None) -> SentimentScore:
    """Asks for a single integer in [-5, 5]; an unusable reply is retried once. Scores are never clamped."""
    system = render("sentiment_system.txt", template_dir)
    user = render("sentiment_user.txt", template_dir, scope=summary.scope.kind.value, subject=subject, month=summary.month, summary=summary.text)
    replies = []
    for _ in range(2):
        reply = gateway.chat(system, user, Purpose.sentiment)
        replies.append(reply)
        score = parse_sentiment(reply)
        if score is not None:
            return SentimentScore(scope=summary.scope, month=summary.month, score=score, source_digest=summary.source_digest,
                                  max_input_date=summary.max_input_date)
        logger.warning("Unusable sentiment reply for [%s] %s: %r", summary.scope, summary.month, reply[:80])
    raise UnparsableSentiment(replies)


def load_articles(jsonl_path: Path) -> list[Article]:
    articles = []
    with open(jsonl_path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                articles.append(Article(
                    published=date.fromisoformat(str(data["published"])[:10]),
                    url=data.get("url") or "",
                    title=data.get("title") or "",
                    body=data.get("body") or "",
                    ticker_hint=data.get("ticker"),
                ))
            except (json.decoder.JSONDecodeError, KeyError, ValueError) as e:
                raise DataError(f"Invalid article on line [{line_number}] of [{jsonl_path}]: {e}") from e
    logger.info("Loaded [%d] articles from: %s", len(articles), jsonl_path)
    return articles
