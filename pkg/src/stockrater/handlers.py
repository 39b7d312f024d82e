import logging
import os
import subprocess
import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from stockrater.config import ExperimentConfig, load_config
from stockrater.fundamentals import load_filing_rows
from stockrater.gateway import ChatGateway
from stockrater.news import NewsScope, ScopeKind, aggregate_monthly, filter_relevant_articles, load_articles
from stockrater.prompting import MethodKind
from stockrater.runner import NewsInputs, create_gateway, ingest_analyst, load_experiment_data, plan_experiment, prepare_news
from stockrater.utils import year_month

logger = logging.getLogger(__name__)


@dataclass
class IngestSummary:
    rows: list[tuple[str, str]] = field(default_factory=list)
    exit_code: int = 0


def resolve_config(config_path: Path | None, **overrides) -> ExperimentConfig:
    path, raw = load_config(config_path)
    config = ExperimentConfig.from_dict(raw, base_dir=path.parent)
    return config.with_overrides(**overrides) if any(v is not None for v in overrides.values()) else config


def ingest_inputs(config: ExperimentConfig) -> IngestSummary:
    """
    Loads and validates every configured input and reports what was found. Quarantined or rejected
    analyst rows make the result partial.
    """
    summary = IngestSummary()
    data = load_experiment_data(config, MethodKind.vanilla)
    plan = plan_experiment(config, data.universe)
    summary.rows += [
        ("companies", str(len(data.universe.companies))),
        ("sectors", str(len(data.universe.sector_index_ids))),
        ("price series", str(len(data.prices))),
        ("planned cells", str(len(plan.cells))),
        ("planned ratings", str(plan.rating_count)),
    ]

    if config.news is not None:
        articles = load_articles(config.news)
        relevant = {c.ticker: filter_relevant_articles(articles, c.name, c.aliases) for c in data.universe.companies}
        per_month = Counter(year_month(a.published) for matched in relevant.values() for a in matched)
        bundles = [
            aggregate_monthly(matched, NewsScope(ScopeKind.company, ticker), month)
            for ticker, matched in relevant.items()
            for month in sorted(per_month)
        ]
        non_empty = [b for b in bundles if b.stats.article_count]
        summary.rows += [
            ("articles", str(len(articles))),
            ("relevant article matches", str(sum(len(m) for m in relevant.values()))),
            ("articles per company-month", f"{sum(b.stats.article_count for b in non_empty) / len(non_empty):.2f}" if non_empty else "0"),
            ("tokens per company-month", f"{sum(b.stats.token_estimate for b in non_empty) / len(non_empty):.0f}" if non_empty else "0"),
            ("missing article bodies", str(sum(b.stats.missing_count for b in bundles))),
        ]

    if config.fundamentals is not None:
        filings = load_filing_rows(config.fundamentals)
        summary.rows.append(("filing rows", str(len(filings))))

    if config.analyst_ratings is not None:
        result = ingest_analyst(config, data)
        summary.rows += [
            ("analyst ratings", str(len(result.events))),
            ("analyst rows quarantined", str(len(result.quarantined))),
            ("analyst rows rejected", str(len(result.rejected))),
        ]
        if result.summary and result.summary.total:
            summary.rows += [(f"{action} share", f"{share:.2%}") for action, share in result.summary.action_share.items()]
            summary.rows.append(("top 5 firms share", f"{result.summary.top_firms_share:.2%}"))
        if result.quarantined or result.rejected:
            summary.exit_code = 1
    return summary


def run_news(config: ExperimentConfig, with_sentiment: bool, gateway: ChatGateway | None = None) -> tuple[NewsInputs, int]:
    if config.news is None:
        raise ValueError("No news file configured, set data.news in the config")
    data = load_experiment_data(config, MethodKind.news)
    plan = plan_experiment(config, data.universe)
    inputs = prepare_news(config, data, gateway or create_gateway(config), plan.cells, with_sentiment)
    for (scope, month), reason in sorted(inputs.failures.items(), key=lambda kv: (kv[0][1], str(kv[0][0]))):
        logger.warning("No %s for [%s] %s: %s", "sentiment" if with_sentiment else "summary", scope, month, reason)
    return inputs, 1 if inputs.failures else 0


def edit_config(config_path: str) -> int:
    editor = os.environ.get("EDITOR", "vi")
    if sys.platform.startswith("win") and not os.environ.get("EDITOR"):
        editor = "notepad"
    # noinspection PyBroadException
    try:
        subprocess.run([editor, config_path])
    except Exception as e:
        raise IOError(f"Could not open file: {config_path}") from e
    return 0
