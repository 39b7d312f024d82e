import dataclasses
import json
import threading
from collections.abc import Callable
from datetime import date
from pathlib import Path

import pandas as pd
import pytest
from pytest_mock import MockerFixture

from stockrater.config import ExperimentConfig, load_config
from stockrater.errors import EmptyDateRange, EmptyUniverse, TaskInterrupted
from stockrater.evaluation import ANALYST_METHOD
from stockrater.gateway import ChatGateway, HorizonPrediction, PredictionRecord, expected_target_dates, render_prediction_block
from stockrater.labeler import LabelMode
from stockrater.market_data import Universe
from stockrater.news import SentimentScore, Summary, score_sentiment
from stockrater.ratings import OrdinalRating
from stockrater.runner import (
    CORRELATIONS_FILENAME, DISTRIBUTION_FILENAME, MONTHLY_FILENAME, QUARANTINE_FILENAME, REPORT_FILENAME, PlannedCell, cell_key, emit_report,
    evaluate_experiment, load_experiment_data, load_manifest, news_month, plan_experiment, prepare_news, read_report_json, run_experiment,
    write_report_json,
)
from stockrater.store import jsonl_store
from stockrater.utils import HORIZONS, add_months, parse_year_month
from test_helpers import LEAKED_REVENUE, LEAKED_TITLE, SyntheticMarket, make_universe, write_config, write_synthetic_market

JULY_DATES = expected_target_dates(date(2022, 7, 1), HORIZONS)


def load_experiment(market: SyntheticMarket, **overrides) -> ExperimentConfig:
    write_config(market, **overrides)
    path, raw = load_config(market.config_path)
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


def scripted_answer(dates: dict[int, date]) -> str:
    record = PredictionRecord(
        company_id="",
        rating_date=date.min,
        entries=tuple(HorizonPrediction(h, d, OrdinalRating.HOLD, 100.0) for h, d in dates.items()),
        explanation="Scripted.",
    )
    return render_prediction_block(record)


def test_plan_size_for_full_universe(experiment_config: ExperimentConfig):
    config = experiment_config.with_overrides(start_month="2020-01", end_month="2022-06")
    plan = plan_experiment(config, make_universe(500))
    assert len(plan.cells) == 500 * 30
    assert plan.rating_count == 75_000


def test_plan_is_month_major(experiment_config: ExperimentConfig):
    config = experiment_config.with_overrides(start_month="2022-07", end_month="2022-08")
    plan = plan_experiment(config, make_universe(3))
    assert [str(c) for c in plan.cells] == ["C000 2022-07", "C001 2022-07", "C002 2022-07", "C000 2022-08", "C001 2022-08", "C002 2022-08"]


def test_plan_preconditions(experiment_config: ExperimentConfig):
    with pytest.raises(EmptyUniverse):
        plan_experiment(experiment_config, Universe(companies=(), market_index_id="MKT"))
    inverted = dataclasses.replace(experiment_config, start_month="2022-09", end_month="2022-08")
    with pytest.raises(EmptyDateRange):
        plan_experiment(inverted, make_universe(3))


def test_news_comes_from_the_previous_month():
    assert news_month(PlannedCell("ACM", date(2022, 7, 1))) == "2022-06"
    assert news_month(PlannedCell("ACM", date(2022, 1, 1))) == "2021-12"


def test_cell_key_depends_on_config_and_cell():
    cell = PlannedCell("ACM", date(2022, 7, 1))
    assert cell_key("a", cell) == cell_key("a", PlannedCell("ACM", date(2022, 7, 1)))
    assert cell_key("a", cell) != cell_key("b", cell)
    assert cell_key("a", cell) != cell_key("a", PlannedCell("BRC", date(2022, 7, 1)))


def test_vanilla_run_persists_every_cell(experiment_config: ExperimentConfig):
    manifest = run_experiment(experiment_config)

    assert manifest.planned_cells == 60
    assert manifest.planned_ratings == 300
    assert manifest.persisted == 60
    assert manifest.gateway_calls == 60
    assert manifest.exit_code == 0
    assert manifest.prompt_tokens_mean > 0
    records = jsonl_store.load_predictions(experiment_config.output_dir / jsonl_store.PREDICTIONS_FILENAME)
    assert len(records) == 60
    assert records[0]["company"] == "ACM"
    assert records[0]["rating_date"] == "2022-07-01"
    assert load_manifest(experiment_config.output_dir)["persisted"] == 60


def test_rerun_resumes_without_gateway_calls(experiment_config: ExperimentConfig):
    run_experiment(experiment_config)
    manifest = run_experiment(experiment_config)
    assert manifest.resumed == 60
    assert manifest.persisted == 0
    assert manifest.gateway_calls == 0
    assert len(jsonl_store.load_records(experiment_config.output_dir / jsonl_store.PREDICTIONS_FILENAME)) == 60


def test_rerun_with_new_gateway_runtime_settings_resumes(synthetic_market: SyntheticMarket):
    run_experiment(load_experiment(synthetic_market))
    config = load_experiment(synthetic_market, gateway={"concurrency": 1, "timeout_seconds": 30, "max_retries": 2, "backoff_seconds": 0.5})

    manifest = run_experiment(config)

    assert (manifest.resumed, manifest.persisted, manifest.gateway_calls) == (60, 0, 0)


@pytest.mark.parametrize(
    "overrides, same",
    [
        pytest.param({"gateway": {"concurrency": 16}}, True, id="concurrency"),
        pytest.param({"gateway": {"timeout_seconds": 5, "max_retries": 0, "backoff_seconds": 3}}, True, id="timeouts-and-retries"),
        pytest.param({"output_dir": "runs/elsewhere"}, True, id="output-dir"),
        pytest.param({"debug_logging": True}, True, id="debug-logging"),
        pytest.param({"gateway": {"model": "another-model"}}, False, id="model"),
        pytest.param({"gateway": {"temperature": 0.7}}, False, id="temperature"),
        pytest.param({"seed": 8}, False, id="seed"),
    ]
)
def test_config_digest_tracks_what_shapes_predictions(synthetic_market: SyntheticMarket, overrides: dict, same: bool):
    baseline = load_experiment(synthetic_market).digest()
    assert (load_experiment(synthetic_market, **overrides).digest() == baseline) is same


def test_partial_store_is_completed_on_rerun(experiment_config: ExperimentConfig):
    run_experiment(experiment_config)
    store = experiment_config.output_dir / jsonl_store.PREDICTIONS_FILENAME
    jsonl_store.rewrite_records(store, jsonl_store.load_records(store)[:25])

    manifest = run_experiment(experiment_config)

    assert (manifest.resumed, manifest.persisted, manifest.gateway_calls) == (25, 35, 35)


def test_runs_are_byte_identical_across_output_dirs(experiment_config: ExperimentConfig, tmp_path: Path):
    outputs = []
    for name in ("first", "second"):
        config = experiment_config.with_overrides(output_dir=tmp_path / name)
        run_experiment(config)
        emit_report(evaluate_experiment(config), config.output_dir)
        outputs.append(config.output_dir)

    for filename in (jsonl_store.PREDICTIONS_FILENAME, jsonl_store.MANIFEST_FILENAME, REPORT_FILENAME, MONTHLY_FILENAME, DISTRIBUTION_FILENAME,
                     CORRELATIONS_FILENAME):
        assert (outputs[0] / filename).read_bytes() == (outputs[1] / filename).read_bytes(), filename


def test_company_without_a_year_of_history_fails_its_cells(tmp_path: Path):
    market = write_synthetic_market(tmp_path / "late", late_starts={"ACM": date(2022, 1, 3)})
    config = load_experiment(market)

    manifest = run_experiment(config)

    assert manifest.failed == 6
    assert manifest.persisted == 54
    assert manifest.exit_code == 1
    assert all("InsufficientHistory" in reason for reason in manifest.failures.values())
    assert sorted(manifest.failures)[0] == "ACM 2022-07"


@pytest.mark.parametrize("method", ["news", "fundamentals", "sentiment", "fundamentals_sentiment"])
def test_no_input_reaches_the_rating_date(synthetic_market: SyntheticMarket, method: str):
    config = load_experiment(synthetic_market, method=method)

    manifest = run_experiment(config)

    assert manifest.persisted == 60
    records = jsonl_store.load_predictions(config.output_dir / jsonl_store.PREDICTIONS_FILENAME)
    assert all(r["max_input_date"] < r["rating_date"] for r in records)
    transcript = (config.output_dir / jsonl_store.TRANSCRIPTS_FILENAME).read_text(encoding="utf-8")
    assert LEAKED_TITLE not in transcript
    assert f"{LEAKED_REVENUE:,.0f}" not in transcript
    if "sentiment" in method:
        # Scores keep the date of the latest article behind them
        scores = jsonl_store.load_records(config.output_dir / jsonl_store.SENTIMENT_FILENAME)
        assert len(scores) == 6 * (10 + 2)
        assert all(s["max_input_date"] == f"{s['month']}-10" for s in scores)


@pytest.mark.parametrize("method", ["sentiment", "fundamentals_sentiment"])
def test_sentiment_scores_dated_on_the_rating_date_are_refused(synthetic_market: SyntheticMarket, mocker: MockerFixture, method: str):
    def _leaky_score(summary: Summary, *args, **kwargs) -> SentimentScore:
        score = score_sentiment(summary, *args, **kwargs)
        # An article from the following month slipped into the bundle
        return dataclasses.replace(score, max_input_date=add_months(parse_year_month(summary.month), 1).replace(day=10))

    mocker.patch("stockrater.runner.score_sentiment", side_effect=_leaky_score)
    config = load_experiment(synthetic_market, method=method)

    manifest = run_experiment(config)

    assert manifest.persisted == 0
    assert manifest.failed == 60
    assert all("LookaheadError" in reason for reason in manifest.failures.values())


def test_news_run_asks_for_sentiment_assessment(synthetic_market: SyntheticMarket):
    config = load_experiment(synthetic_market, method="news")

    manifest = run_experiment(config)

    # Company and sector summaries for six news months
    assert manifest.summaries_computed == 6 * (10 + 2)
    records = jsonl_store.load_predictions(config.output_dir / jsonl_store.PREDICTIONS_FILENAME)
    assert {r["prediction"]["sentiment_assessment"] for r in records} <= {"positive", "negative", "neutral", "mixed"}
    assert all(r["prediction"]["sentiment_assessment"] for r in records)
    summaries = jsonl_store.load_records(config.output_dir / jsonl_store.SUMMARIES_FILENAME)
    assert {s["month"] for s in summaries} == {"2022-06", "2022-07", "2022-08", "2022-09", "2022-10", "2022-11"}


def test_sentiment_run_records_its_inputs(synthetic_market: SyntheticMarket):
    config = load_experiment(synthetic_market, method="sentiment")

    manifest = run_experiment(config)

    assert manifest.sentiment_computed == 6 * 12
    record = jsonl_store.load_predictions(config.output_dir / jsonl_store.PREDICTIONS_FILENAME)[0]
    assert set(record["inputs"]) == {"company_sentiment", "sector_sentiment"}
    assert all(-5 <= v <= 5 for v in record["inputs"].values())

    report = evaluate_experiment(config)
    assert {("company_sentiment", "rating_3m"), ("sector_sentiment", "rating_3m")} <= {(c.x, c.y) for c in report.correlations}


def test_stored_summaries_are_reused(synthetic_market: SyntheticMarket, gateway_factory: Callable[..., ChatGateway]):
    config = load_experiment(synthetic_market, method="news")
    data = load_experiment_data(config)
    cells = plan_experiment(config, data.universe).cells
    gateway = gateway_factory()

    first = prepare_news(config, data, gateway, cells, with_sentiment=True)
    calls = gateway.call_count
    second = prepare_news(config, data, gateway, cells, with_sentiment=True)

    assert first.summaries_computed == 72 and first.sentiment_computed == 72
    assert (second.summaries_computed, second.sentiment_computed) == (0, 0)
    assert gateway.call_count == calls
    assert second.summaries == first.summaries
    assert second.sentiment == first.sentiment


def test_missing_news_month_fails_only_those_cells(synthetic_market: SyntheticMarket):
    # Nothing was published before 2022, so January cells have no news to read
    config = load_experiment(synthetic_market, method="news", start_month="2022-01", end_month="2022-02")

    manifest = run_experiment(config)

    assert manifest.failed == 10
    assert manifest.persisted == 10
    assert all(key.endswith("2022-01") for key in manifest.failures)


def test_wrong_target_date_is_excluded_after_one_retry(synthetic_market: SyntheticMarket, gateway_factory: Callable[..., ChatGateway]):
    config = load_experiment(synthetic_market, start_month="2022-07", end_month="2022-07")
    wrong = scripted_answer({**JULY_DATES, 12: date(2023, 8, 1)})
    gateway = gateway_factory(script=[wrong, wrong, scripted_answer(JULY_DATES)])

    manifest = run_experiment(config, gateway=gateway)

    assert manifest.excluded == 1
    assert manifest.cove_exclusions == 1
    assert manifest.persisted == 9
    assert manifest.gateway_calls == 11
    assert manifest.failures == {"ACM 2022-07": "cove: 12m expected 2023-07-01 got 2023-08-01"}
    records = jsonl_store.load_predictions(config.output_dir / jsonl_store.PREDICTIONS_FILENAME, status=None)
    assert (records[0]["company"], records[0]["status"], records[0]["prediction"]) == ("ACM", "excluded", None)


def test_wrong_target_date_is_discarded_when_configured(synthetic_market: SyntheticMarket, gateway_factory: Callable[..., ChatGateway]):
    config = load_experiment(synthetic_market, start_month="2022-07", end_month="2022-07", cove={"on_mismatch": "discard"})
    wrong = scripted_answer({**JULY_DATES, 12: date(2023, 8, 1)})
    gateway = gateway_factory(script=[wrong, scripted_answer(JULY_DATES)])

    manifest = run_experiment(config, gateway=gateway)

    assert manifest.cove_exclusions == 1
    assert manifest.gateway_calls == 10


def test_malformed_answer_is_retried_once(synthetic_market: SyntheticMarket, gateway_factory: Callable[..., ChatGateway]):
    config = load_experiment(synthetic_market, start_month="2022-07", end_month="2022-07")
    gateway = gateway_factory(script=["I would rather not say.", scripted_answer(JULY_DATES)])

    manifest = run_experiment(config, gateway=gateway)

    assert manifest.persisted == 10
    assert manifest.excluded == 0
    assert manifest.gateway_calls == 11


def test_cancelled_run_writes_manifest_and_resumes(experiment_config: ExperimentConfig):
    stop_event = threading.Event()
    stop_event.set()

    with pytest.raises(TaskInterrupted):
        run_experiment(experiment_config, stop_event=stop_event)

    assert load_manifest(experiment_config.output_dir)["interrupted"] == 60
    assert run_experiment(experiment_config).persisted == 60


def test_momentum_beats_random(experiment_config: ExperimentConfig):
    run_experiment(experiment_config)

    report = evaluate_experiment(experiment_config)

    scores = report.methods["vanilla"]
    assert scores.composite[LabelMode.absolute] < 1.6
    assert scores.per_horizon[(1, LabelMode.absolute)].n == 60


def test_evaluation_scores_analysts_and_skips_unlabelled_horizons(experiment_config: ExperimentConfig, tmp_path: Path):
    run_experiment(experiment_config)
    labels_path = tmp_path / "labels.csv"

    report = evaluate_experiment(experiment_config, labels_out=labels_path)

    analyst = report.methods[ANALYST_METHOD]
    assert analyst.distribution.total == 30
    assert (1, LabelMode.absolute) in analyst.per_horizon
    # Eighteen months past late 2022 is beyond the last price
    assert {(s.rating_date, s.horizon) for s in report.skipped} >= {(date(2022, 12, 1), 18)}
    assert (experiment_config.output_dir / QUARANTINE_FILENAME).exists()
    labels = pd.read_csv(labels_path)
    assert set(labels["mode"]) == {"absolute", "sector-relative"}
    assert len(labels[(labels["rating_date"] == "2022-07-01") & (labels["horizon_months"] == 1)]) == 20


def test_evaluation_ignores_predictions_from_other_configs(experiment_config: ExperimentConfig):
    run_experiment(experiment_config)
    other = experiment_config.with_overrides(seed=8)

    report = evaluate_experiment(other)

    assert report.methods["vanilla"].per_horizon == {}
    assert report.correlations == []


def test_report_files(experiment_config: ExperimentConfig):
    run_experiment(experiment_config)
    report = evaluate_experiment(experiment_config)

    paths = emit_report(report, experiment_config.output_dir)

    assert [p.name for p in paths] == [REPORT_FILENAME, MONTHLY_FILENAME, DISTRIBUTION_FILENAME, CORRELATIONS_FILENAME]
    monthly = pd.read_csv(experiment_config.output_dir / MONTHLY_FILENAME)
    assert set(monthly["method"]) == {"vanilla", ANALYST_METHOD}
    distribution = pd.read_csv(experiment_config.output_dir / DISTRIBUTION_FILENAME)
    vanilla = distribution[distribution["method"] == "vanilla"]
    assert vanilla["count"].sum() == 300
    assert vanilla["proportion"].sum() == pytest.approx(1.0)
    data = json.loads((experiment_config.output_dir / REPORT_FILENAME).read_text())
    assert data["config_digest"] == experiment_config.digest()


def test_report_json_round_trip(experiment_config: ExperimentConfig):
    run_experiment(experiment_config)
    report = evaluate_experiment(experiment_config)
    write_report_json(report, experiment_config.output_dir)
    assert read_report_json(experiment_config.output_dir).to_dict() == report.to_dict()
