import json
import logging
import threading
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Any, TypeVar

import pandas as pd

from stockrater.config import ExperimentConfig
from stockrater.errors import (EmptyBundle, EmptyDateRange, EmptyUniverse, GatewayError, LookaheadError, MalformedResponse, NoTradingDate,
                               StockRaterError, TaskInterrupted, TooFewCompanies)
from stockrater.evaluation import ANALYST_METHOD, EvaluationReport, SkippedCell, correlations, score_method
from stockrater.fundamentals import FilingRow, ingest_fundamentals, load_filing_rows, load_metric_definitions
from stockrater.gateway import ChatGateway, PredictionRecord, create_backend, parse_prediction, verify_dates_cove
from stockrater.gateway.models import Purpose
from stockrater.labeler import LabelMode, QuantileLabel, export_labels, label_universe
from stockrater.market_data import PriceSeries, Universe, build_technical_snapshot, load_prices, load_universe, market_series, resolve_trading_date
from stockrater.news import (Article, NewsScope, ScopeKind, SentimentScore, Summary, aggregate_monthly, filter_relevant_articles, load_articles,
                             pool_sector_articles, score_sentiment, summarize)
from stockrater.prompting import MethodKind, PromptBundle, build_system_prompt, build_user_prompt, load_few_shot_example
from stockrater.ratings import AnalystIngestResult, CellRating, OrdinalRating, ingest_analyst_ratings, load_analyst_rows, load_rating_synonyms, write_quarantine
from stockrater.store import jsonl_store
from stockrater.utils import add_months, digest, month_starts, parse_year_month, year_month

logger = logging.getLogger(__name__)

REPORT_FILENAME = "evaluation_report.json"
MONTHLY_FILENAME = "monthly_mae.csv"
DISTRIBUTION_FILENAME = "rating_distribution.csv"
CORRELATIONS_FILENAME = "correlations.csv"
QUARANTINE_FILENAME = "analyst_quarantine.csv"

MONTHLY_COLUMNS = ["method", "month", "horizon_months", "mode", "mae", "n"]
DISTRIBUTION_COLUMNS = ["method", "rating", "count", "proportion"]
CORRELATION_COLUMNS = ["method", "x", "y", "rho", "n"]

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class PlannedCell:
    company_id: str
    month_start: date

    @property
    def month(self) -> str:
        return year_month(self.month_start)

    def __str__(self) -> str:
        return f"{self.company_id} {self.month}"


@dataclass(frozen=True)
class ExperimentPlan:
    cells: tuple[PlannedCell, ...]
    horizons: tuple[int, ...]

    @property
    def rating_count(self) -> int:
        return len(self.cells) * len(self.horizons)


@dataclass
class ExperimentData:
    universe: Universe
    prices: dict[str, PriceSeries]
    market: PriceSeries
    synonyms: dict[str, OrdinalRating]
    metric_definitions: dict[str, str]
    articles: list[Article] = field(default_factory=list)
    filings: list[FilingRow] = field(default_factory=list)


@dataclass
class RunManifest:
    config_digest: str
    method: str
    planned_cells: int = 0
    planned_ratings: int = 0
    persisted: int = 0
    resumed: int = 0
    excluded: int = 0
    failed: int = 0
    interrupted: int = 0
    cove_exclusions: int = 0
    malformed_exclusions: int = 0
    gateway_calls: int = 0
    summaries_computed: int = 0
    sentiment_computed: int = 0
    prompt_tokens_total: int = 0
    prompt_tokens_mean: float = 0.0
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 1 if (self.failed or self.excluded or self.interrupted) else 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def write(self, output_dir: Path) -> Path:
        path = output_dir / jsonl_store.MANIFEST_FILENAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


@dataclass
class CellOutcome:
    cell: PlannedCell
    status: str
    record: dict[str, Any] | None = None
    reason: str | None = None
    token_estimate: int = 0


@dataclass
class NewsInputs:
    summaries: dict[tuple[NewsScope, str], Summary] = field(default_factory=dict)
    sentiment: dict[tuple[NewsScope, str], SentimentScore] = field(default_factory=dict)
    failures: dict[tuple[NewsScope, str], str] = field(default_factory=dict)
    summaries_computed: int = 0
    sentiment_computed: int = 0


def load_experiment_data(config: ExperimentConfig, method: MethodKind | None = None) -> ExperimentData:
    """Loads every input the method needs. Unreadable or invalid inputs are fatal."""
    method = method or MethodKind(config.method)
    universe = load_universe(config.universe)
    prices = load_prices(config.prices)
    data = ExperimentData(
        universe=universe,
        prices=prices,
        market=market_series(universe, prices),
        synonyms=load_rating_synonyms(config.rating_synonyms),
        metric_definitions=load_metric_definitions(config.metric_definitions),
    )
    if method.uses_news or method.uses_sentiment:
        if config.news is None:
            raise ValueError(f"Method [{method.value}] needs data.news in the config")
        data.articles = load_articles(config.news)
    if method.uses_fundamentals:
        if config.fundamentals is None:
            raise ValueError(f"Method [{method.value}] needs data.fundamentals in the config")
        data.filings = load_filing_rows(config.fundamentals)
    return data


def plan_experiment(config: ExperimentConfig, universe: Universe | None = None) -> ExperimentPlan:
    universe = universe if universe is not None else load_universe(config.universe)
    if not universe.companies:
        raise EmptyUniverse("The universe has no companies")
    start, end = parse_year_month(config.start_month), parse_year_month(config.end_month)
    if start > end:
        raise EmptyDateRange(f"Start month [{config.start_month}] is after end month [{config.end_month}]")
    cells = tuple(PlannedCell(ticker, month) for month in month_starts(start, end) for ticker in universe.tickers)
    plan = ExperimentPlan(cells=cells, horizons=tuple(config.horizons))
    logger.info("Planned [%d] cells and [%d] ratings", len(plan.cells), plan.rating_count)
    return plan


def cell_key(config_digest: str, cell: PlannedCell) -> str:
    return digest({"config": config_digest, "company": cell.company_id, "month": cell.month})


def news_month(cell: PlannedCell) -> str:
    """Prompts see the previous calendar month's news only."""
    return year_month(add_months(cell.month_start, -1))


def create_gateway(config: ExperimentConfig) -> ChatGateway:
    backend = create_backend(config.gateway, config.seed)
    return ChatGateway(backend, config.gateway, config.output_dir / jsonl_store.TRANSCRIPTS_FILENAME)


def _ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    # Results come back in input order, so stores are written deterministically
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


def prepare_news(config: ExperimentConfig, data: ExperimentData, gateway: ChatGateway, cells: Iterable[PlannedCell],
                 with_sentiment: bool) -> NewsInputs:
    """
    Computes or reloads the company and sector summaries (and optionally sentiment scores) the
    given cells need. Stores are keyed by (scope, month, digest), so reruns reuse earlier results.
    """
    summaries_path = config.output_dir / jsonl_store.SUMMARIES_FILENAME
    sentiment_path = config.output_dir / jsonl_store.SENTIMENT_FILENAME
    universe = data.universe

    relevant = {
        c.ticker: filter_relevant_articles(data.articles, c.name, c.aliases)
        for c in universe.companies
    }
    wanted: dict[tuple[NewsScope, str], str] = {}
    for cell in cells:
        company = universe.company(cell.company_id)
        month = news_month(cell)
        wanted[(NewsScope(ScopeKind.company, company.ticker), month)] = company.name
        wanted[(NewsScope(ScopeKind.sector, company.sector), month)] = company.sector

    inputs = NewsInputs()
    stored = jsonl_store.load_scoped(summaries_path)
    to_compute = []
    for (scope, month), subject in sorted(wanted.items(), key=lambda kv: (kv[0][1], kv[0][0].kind.value, kv[0][0].key)):
        if scope.kind == ScopeKind.company:
            articles = relevant[scope.key]
        else:
            articles = pool_sector_articles(relevant, [c.ticker for c in universe.constituents(scope.key)])
        bundle = aggregate_monthly(articles, scope, month)
        if bundle.stats.article_count == bundle.stats.missing_count:
            inputs.failures[(scope, month)] = f"No news for [{scope}] in {month}"
            continue
        found = stored.get((scope.kind.value, scope.key, month, bundle.digest()))
        if found is not None:
            inputs.summaries[(scope, month)] = Summary.from_dict(found)
        else:
            to_compute.append((bundle, subject))

    def _summarize(item):
        bundle, subject = item
        try:
            return summarize(bundle, gateway, subject, config.template_dir, config.max_articles_per_call)
        except (EmptyBundle, GatewayError) as e:
            return e

    for (bundle, _), result in zip(to_compute, _ordered_map(_summarize, to_compute, gateway.settings.concurrency)):
        key = (bundle.scope, bundle.month)
        if isinstance(result, StockRaterError):
            inputs.failures[key] = result.message
            continue
        jsonl_store.save_scoped(summaries_path, result.to_dict())
        inputs.summaries[key] = result
        inputs.summaries_computed += 1

    if not with_sentiment:
        return inputs

    stored_scores = jsonl_store.load_scoped(sentiment_path)
    to_score = []
    for key, summary in sorted(inputs.summaries.items(), key=lambda kv: (kv[0][1], kv[0][0].kind.value, kv[0][0].key)):
        found = stored_scores.get((summary.scope.kind.value, summary.scope.key, summary.month, summary.source_digest))
        if found is not None:
            inputs.sentiment[key] = SentimentScore.from_dict(found)
        else:
            to_score.append((summary, wanted[key]))

    def _score(item):
        summary, subject = item
        try:
            return score_sentiment(summary, gateway, subject, config.template_dir)
        except (StockRaterError, ValueError) as e:
            return e

    for (summary, _), result in zip(to_score, _ordered_map(_score, to_score, gateway.settings.concurrency)):
        key = (summary.scope, summary.month)
        if isinstance(result, Exception):
            inputs.failures[key] = getattr(result, "message", str(result))
            continue
        jsonl_store.save_scoped(sentiment_path, result.to_dict())
        inputs.sentiment[key] = result
        inputs.sentiment_computed += 1
    return inputs


class _CellPredictor:
    def __init__(self, config: ExperimentConfig, data: ExperimentData, gateway: ChatGateway, news: NewsInputs | None,
                 stop_event: threading.Event | None) -> None:
        self.config = config
        self.data = data
        self.gateway = gateway
        self.news = news
        self.stop_event = stop_event
        self.method = MethodKind(config.method)
        self.config_digest = config.digest()
        self.few_shot = load_few_shot_example() if config.few_shot else None
        self.system = build_system_prompt(self.method, data.metric_definitions, data.synonyms, config.template_dir)
        self._rating_dates: dict[date, date | str] = {}
        self._lock = threading.Lock()

    def rating_date(self, month_start: date) -> date:
        """First trading day of the month on the market calendar."""
        with self._lock:
            if month_start not in self._rating_dates:
                try:
                    self._rating_dates[month_start] = resolve_trading_date(month_start, self.data.market, self.config.max_roll_days)
                except NoTradingDate as e:
                    self._rating_dates[month_start] = e.message
            resolved = self._rating_dates[month_start]
        if isinstance(resolved, str):
            raise NoTradingDate(resolved)
        return resolved

    def __call__(self, cell: PlannedCell) -> CellOutcome:
        if self.stop_event is not None and self.stop_event.is_set():
            return CellOutcome(cell, "interrupted", reason="Cancellation requested before the cell started")
        try:
            return self._predict(cell)
        except (StockRaterError, ValueError) as e:
            reason = getattr(e, "message", str(e))
            logger.warning("Cell [%s] failed: %s", cell, reason)
            return CellOutcome(cell, "failed", reason=f"{type(e).__name__}: {reason}")

    def _news_inputs(self, cell: PlannedCell) -> tuple[list[Summary] | None, list[SentimentScore] | None]:
        if self.news is None:
            return None, None
        company = self.data.universe.company(cell.company_id)
        month = news_month(cell)
        keys = [(NewsScope(ScopeKind.company, company.ticker), month), (NewsScope(ScopeKind.sector, company.sector), month)]
        source = self.news.sentiment if self.method.uses_sentiment else self.news.summaries
        for key in keys:
            if key not in source:
                raise EmptyBundle(self.news.failures.get(key, f"No news input for [{key[0]}] in {month}"))
        if self.method.uses_sentiment:
            return None, [self.news.sentiment[k] for k in keys]
        return [self.news.summaries[k] for k in keys], None

    def _predict(self, cell: PlannedCell) -> CellOutcome:
        universe, prices = self.data.universe, self.data.prices
        company = universe.company(cell.company_id)
        rating_date = self.rating_date(cell.month_start)
        series = prices.get(company.ticker)
        sector = prices.get(universe.sector_index_for(company.ticker))
        if series is None or sector is None:
            raise StockRaterError(f"No prices for [{company.ticker}] or its sector index")

        # The snapshot is taken at the previous close so no input shares the rating date
        snapshot = build_technical_snapshot(series, self.data.market, sector, rating_date - timedelta(days=1))
        summaries, sentiment = self._news_inputs(cell)
        fundamentals = None
        if self.method.uses_fundamentals:
            fundamentals = ingest_fundamentals(self.data.filings, company.ticker, rating_date, self.data.metric_definitions)

        bundle = build_user_prompt(
            self.method,
            company,
            rating_date,
            snapshot,
            news=summaries,
            sentiment=sentiment,
            fundamentals=fundamentals,
            few_shot=self.few_shot,
            horizons=self.config.horizons,
            system=self.system,
            template_dir=self.config.template_dir,
        )
        if bundle.max_input_date >= rating_date:
            raise LookaheadError(f"Inputs for [{cell}] reach [{bundle.max_input_date}], not before [{rating_date}]")

        record, reason = self._ask(bundle, company.ticker, rating_date)
        stored = {
            "cell_key": cell_key(self.config_digest, cell),
            "config_digest": self.config_digest,
            "method": self.method.value,
            "company": company.ticker,
            "month": cell.month,
            "rating_date": rating_date.isoformat(),
            "max_input_date": bundle.max_input_date.isoformat(),
            "input_digest": bundle.input_digest,
            "token_estimate": bundle.token_estimate,
            "inputs": {f"{s.scope.kind.value}_sentiment": s.score for s in sentiment or []},
            "status": "ok" if record is not None else "excluded",
            "prediction": record.to_dict() if record is not None else None,
            "reason": reason,
        }
        return CellOutcome(cell, stored["status"], record=stored, reason=reason, token_estimate=bundle.token_estimate)

    def _ask(self, bundle: PromptBundle, ticker: str, rating_date: date) -> tuple[PredictionRecord | None, str | None]:
        """
        One retry for a malformed answer or a date mismatch. A cell that still fails is excluded
        with the reason recorded, never scored.
        """
        request = self.gateway.request(bundle.system, bundle.user, Purpose.rating)
        attempts = 2 if self.config.cove_on_mismatch == "retry" else 1
        reason = None
        for attempt in range(1, 3):
            response = self.gateway.complete(request)
            try:
                record = parse_prediction(response, ticker, rating_date, bundle.expected_dates, self.data.synonyms)
            except MalformedResponse as e:
                reason = f"malformed: {e.message}"
                logger.warning("Malformed answer for [%s] on [%s], attempt [%d]: %s", ticker, rating_date, attempt, e.message)
                continue
            mismatch = verify_dates_cove(record, rating_date)
            if mismatch is None:
                return record, None
            reason = f"cove: {mismatch.describe()}"
            logger.warning("Target date mismatch for [%s] on [%s], attempt [%d]: %s", ticker, rating_date, attempt, mismatch.describe())
            if attempt >= attempts:
                break
        return None, reason


def run_experiment(config: ExperimentConfig, gateway: ChatGateway | None = None, stop_event: threading.Event | None = None,
                   data: ExperimentData | None = None) -> RunManifest:
    """
    Predicts every planned cell not already in the store, writes results in plan order and
    returns the run manifest. Per-cell failures are recorded and the run carries on.
    """
    method = MethodKind(config.method)
    data = data or load_experiment_data(config, method)
    gateway = gateway or create_gateway(config)
    plan = plan_experiment(config, data.universe)
    config_digest = config.digest()
    predictions_path = config.output_dir / jsonl_store.PREDICTIONS_FILENAME

    manifest = RunManifest(config_digest=config_digest, method=method.value, planned_cells=len(plan.cells), planned_ratings=plan.rating_count)
    existing = jsonl_store.load_prediction_keys(predictions_path)
    pending = [c for c in plan.cells if cell_key(config_digest, c) not in existing]
    manifest.resumed = len(plan.cells) - len(pending)
    if manifest.resumed:
        logger.info("Resuming run, [%d] cells already in the store", manifest.resumed)

    calls_before = gateway.call_count
    news = None
    if pending and (method.uses_news or method.uses_sentiment):
        news = prepare_news(config, data, gateway, pending, with_sentiment=method.uses_sentiment)
        manifest.summaries_computed = news.summaries_computed
        manifest.sentiment_computed = news.sentiment_computed

    predictor = _CellPredictor(config, data, gateway, news, stop_event)
    token_estimates = []
    for outcome in _ordered_map(predictor, pending, gateway.settings.concurrency):
        match outcome.status:
            case "ok" | "excluded":
                jsonl_store.save_prediction(predictions_path, outcome.record)
                token_estimates.append(outcome.token_estimate)
                if outcome.status == "ok":
                    manifest.persisted += 1
                else:
                    manifest.excluded += 1
                    if outcome.reason and outcome.reason.startswith("cove"):
                        manifest.cove_exclusions += 1
                    else:
                        manifest.malformed_exclusions += 1
                    manifest.failures[str(outcome.cell)] = outcome.reason or ""
            case "interrupted":
                manifest.interrupted += 1
            case _:
                manifest.failed += 1
                manifest.failures[str(outcome.cell)] = outcome.reason or ""

    manifest.gateway_calls = gateway.call_count - calls_before
    manifest.prompt_tokens_total = sum(token_estimates)
    manifest.prompt_tokens_mean = round(manifest.prompt_tokens_total / len(token_estimates), 2) if token_estimates else 0.0
    manifest.write(config.output_dir)
    logger.info("Run finished: [%d] persisted, [%d] resumed, [%d] excluded, [%d] failed, [%d] gateway calls",
                manifest.persisted, manifest.resumed, manifest.excluded, manifest.failed, manifest.gateway_calls)
    if manifest.interrupted:
        raise TaskInterrupted(f"Run interrupted with [{manifest.interrupted}] cells left, rerun to resume")
    return manifest


def load_manifest(output_dir: Path) -> dict[str, Any]:
    path = output_dir / jsonl_store.MANIFEST_FILENAME
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _label_cells(data: ExperimentData, keys: Iterable[tuple[date, int]], max_roll_days: int) -> tuple[list[QuantileLabel], list[SkippedCell]]:
    labels: list[QuantileLabel] = []
    skipped: list[SkippedCell] = []
    for rating_date, horizon in sorted(set(keys)):
        for mode in LabelMode:
            try:
                labels.extend(label_universe(data.prices, data.universe, rating_date, horizon, mode, max_roll_days).labels)
            except TooFewCompanies as e:
                skipped.append(SkippedCell(rating_date, horizon, mode, e.message))
    return labels, skipped


def ingest_analyst(config: ExperimentConfig, data: ExperimentData) -> AnalystIngestResult:
    result = ingest_analyst_ratings(load_analyst_rows(config.analyst_ratings), data.synonyms)
    if result.quarantined or result.rejected:
        path = config.output_dir / QUARANTINE_FILENAME
        write_quarantine(result.quarantined + result.rejected, path)
        logger.warning("[%d] analyst rows quarantined and [%d] rejected, see: %s", len(result.quarantined), len(result.rejected), path)
    return result


def evaluate_experiment(config: ExperimentConfig, data: ExperimentData | None = None,
                        labels_out: Path | None = None) -> EvaluationReport:
    """
    Labels every rating date in the store and scores the stored predictions against them. Analyst
    ratings in the configured months, when supplied, are scored the same way as their own method.
    """
    method = MethodKind(config.method)
    data = data or load_experiment_data(config, MethodKind.vanilla)
    config_digest = config.digest()
    stored = [r for r in jsonl_store.load_predictions(config.output_dir / jsonl_store.PREDICTIONS_FILENAME)
              if r.get("config_digest") == config_digest]
    records = [PredictionRecord.from_dict(r["prediction"]) for r in stored]
    cell_ratings = [e for r in records for e in _cell_ratings(r)]

    analyst_ratings = []
    analyst_events = []
    if config.analyst_ratings is not None:
        start, end = config.start_month, config.end_month
        analyst_events = [e for e in ingest_analyst(config, data).events
                          if start <= year_month(e.date) <= end and e.company_id in data.universe.tickers]
        analyst_ratings = [c for e in analyst_events for c in e.cell_ratings(config.horizons)]

    labels, skipped = _label_cells(data, ((c.rating_date, c.horizon) for c in [*cell_ratings, *analyst_ratings]), config.max_roll_days)
    if labels_out is not None:
        export_labels(labels, labels_out)
        logger.info("Exported [%d] labels to: %s", len(labels), labels_out)

    report = EvaluationReport(config_digest=config_digest, skipped=skipped)
    report.methods[method.value] = score_method(cell_ratings, labels)
    if config.analyst_ratings is not None:
        report.methods[ANALYST_METHOD] = score_method(analyst_ratings, labels, distribution_of=[e.rating for e in analyst_events])
    sentiment_inputs = {(r["company"], date.fromisoformat(r["rating_date"])): r.get("inputs", {}) for r in stored if r.get("inputs")}
    report.correlations = correlations(method.value, records, sentiment_inputs)
    logger.info("Evaluated [%d] predictions with [%d] labels, [%d] label cells skipped", len(records), len(labels), len(skipped))
    return report


def _cell_ratings(record: PredictionRecord) -> list[CellRating]:
    return [CellRating(record.company_id, record.rating_date, e.horizon, e.rating) for e in record.entries]


def write_report_json(report: EvaluationReport, output_dir: Path) -> Path:
    path = output_dir / REPORT_FILENAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_report_json(output_dir: Path) -> EvaluationReport:
    path = output_dir / REPORT_FILENAME
    try:
        with open(path, "r", encoding="utf-8") as f:
            return EvaluationReport.from_dict(json.load(f))
    except json.decoder.JSONDecodeError as e:
        raise ValueError(f"Failed to load evaluation report [{path}]: {e}") from e


def emit_report(report: EvaluationReport, output_dir: Path) -> list[Path]:
    """Writes the JSON report and the monthly, distribution and correlation CSV tables."""
    monthly = [
        [method, month, horizon, mode.value, result.mean, result.n]
        for method, scores in sorted(report.methods.items())
        for (month, horizon, mode), result in scores.monthly.items()
    ]
    distribution = [
        [method, rating, count, scores.distribution.proportions[rating]]
        for method, scores in sorted(report.methods.items())
        for rating, count in scores.distribution.counts.items()
    ]
    correlation_rows = [[c.method, c.x, c.y, c.rho, c.n] for c in report.correlations]

    paths = [write_report_json(report, output_dir)]
    for filename, rows, columns in ((MONTHLY_FILENAME, monthly, MONTHLY_COLUMNS),
                                    (DISTRIBUTION_FILENAME, distribution, DISTRIBUTION_COLUMNS),
                                    (CORRELATIONS_FILENAME, correlation_rows, CORRELATION_COLUMNS)):
        path = output_dir / filename
        pd.DataFrame(rows, columns=columns).to_csv(path, index=False, lineterminator="\n")
        paths.append(path)
    logger.info("Report written to: %s", output_dir)
    return paths
