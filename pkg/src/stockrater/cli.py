import json
import logging
import signal
import threading
from pathlib import Path
from typing import Annotated

import typer
from tabulate import tabulate

from stockrater.config import APP_NAME, load_config, update_log_level
from stockrater.formatters import OutputFormat, format_scores
from stockrater.handlers import edit_config, ingest_inputs, resolve_config, run_news
from stockrater.prompting import MethodKind
from stockrater.runner import emit_report, evaluate_experiment, plan_experiment, read_report_json, run_experiment, write_report_json
from stockrater.store import jsonl_store

logger = logging.getLogger(__name__)
app = typer.Typer(name=APP_NAME, no_args_is_help=True)
stop_event = threading.Event()

VERBOSITY_MAP = {
    0: logging.ERROR,  # default if no -v
    1: logging.INFO,   # -v
    2: logging.DEBUG,  # -vv
}

ConfigOption = Annotated[Path | None, typer.Option("--config", "-c", help="Experiment config file", show_default="user config dir")]
MethodOption = Annotated[MethodKind | None, typer.Option(help="Override the prompting method")]
StartOption = Annotated[str | None, typer.Option("--start-month", help="Override the first rating month (YYYY-MM)")]
EndOption = Annotated[str | None, typer.Option("--end-month", help="Override the last rating month (YYYY-MM)")]
OutputOption = Annotated[Path | None, typer.Option("--output-dir", help="Override the run output directory")]
SeedOption = Annotated[int | None, typer.Option(help="Override the mock backend seed")]


def _setup_cli_shutdown_hook() -> None:
    def handle_sigint(_sig, _frame):
        typer.echo("Interrupted via Ctrl+C, finishing in-flight cells before stopping...", err=True)
        stop_event.set()
        # A second Ctrl+C stops immediately
        signal.signal(signal.SIGINT, signal.default_int_handler)

    signal.signal(signal.SIGINT, handle_sigint)


def _config(config: Path | None, method: MethodKind | None = None, start_month: str | None = None, end_month: str | None = None,
            output_dir: Path | None = None, seed: int | None = None):
    return resolve_config(
        config,
        method=method.value if method else None,
        start_month=start_month,
        end_month=end_month,
        output_dir=output_dir,
        seed=seed,
    )


@app.callback()
def main(
    verbose: int = typer.Option(
        0,
        "--verbose",
        "-v",
        count=True,
        help="Increase verbosity (-v, -vv).",
    ),
):
    console_level = VERBOSITY_MAP.get(verbose, logging.DEBUG)  # Default to debug if more than -vv is used
    update_log_level("console", console_level)


@app.command("ingest", help="Load and validate the configured inputs and print what was found")
def ingest_cmd(config: ConfigOption = None, start_month: StartOption = None, end_month: EndOption = None, output_dir: OutputOption = None):
    summary = ingest_inputs(_config(config, start_month=start_month, end_month=end_month, output_dir=output_dir))
    typer.echo(tabulate(summary.rows, headers=["input", "value"], tablefmt="grid"))
    raise typer.Exit(code=summary.exit_code)


@app.command("plan", help="Print the size of the experiment grid")
def plan_cmd(config: ConfigOption = None, start_month: StartOption = None, end_month: EndOption = None):
    plan = plan_experiment(_config(config, start_month=start_month, end_month=end_month))
    typer.echo(f"{len(plan.cells)} cells x {len(plan.horizons)} horizons = {plan.rating_count} ratings")


@app.command("summarize", help="Summarise the monthly company and sector news the configured months need")
def summarize_cmd(config: ConfigOption = None, start_month: StartOption = None, end_month: EndOption = None, output_dir: OutputOption = None,
                  seed: SeedOption = None):
    inputs, code = run_news(_config(config, start_month=start_month, end_month=end_month, output_dir=output_dir, seed=seed), with_sentiment=False)
    typer.echo(f"{len(inputs.summaries)} summaries ready ({inputs.summaries_computed} computed), {len(inputs.failures)} without news")
    raise typer.Exit(code=code)


@app.command("score-sentiment", help="Score the sentiment of the monthly news summaries, summarising first where needed")
def score_sentiment_cmd(config: ConfigOption = None, start_month: StartOption = None, end_month: EndOption = None, output_dir: OutputOption = None,
                        seed: SeedOption = None):
    inputs, code = run_news(_config(config, start_month=start_month, end_month=end_month, output_dir=output_dir, seed=seed), with_sentiment=True)
    typer.echo(f"{len(inputs.sentiment)} sentiment scores ready ({inputs.sentiment_computed} computed), {len(inputs.failures)} unavailable")
    raise typer.Exit(code=code)


@app.command("predict", help="Rate every planned cell not already in the prediction store")
def predict_cmd(config: ConfigOption = None, method: MethodOption = None, start_month: StartOption = None, end_month: EndOption = None,
                output_dir: OutputOption = None, seed: SeedOption = None):
    experiment = _config(config, method, start_month, end_month, output_dir, seed)
    _setup_cli_shutdown_hook()
    manifest = run_experiment(experiment, stop_event=stop_event)
    typer.echo(
        f"{manifest.persisted} persisted, {manifest.resumed} resumed, {manifest.excluded} excluded, "
        f"{manifest.failed} failed, {manifest.gateway_calls} gateway calls"
    )
    raise typer.Exit(code=manifest.exit_code)


# noinspection PyShadowingBuiltins
@app.command("evaluate", help="Score the stored predictions against quintile labels and write evaluation_report.json")
def evaluate_cmd(config: ConfigOption = None, method: MethodOption = None, start_month: StartOption = None, end_month: EndOption = None,
                 output_dir: OutputOption = None, seed: SeedOption = None,
                 labels_out: Annotated[Path | None, typer.Option("--labels-out", help="Also export the quintile labels to this CSV")] = None,
                 format: Annotated[OutputFormat, typer.Option(help="Output format")] = OutputFormat.table):
    experiment = _config(config, method, start_month, end_month, output_dir, seed)
    report = evaluate_experiment(experiment, labels_out=labels_out)
    write_report_json(report, experiment.output_dir)
    typer.echo(format_scores(report, format))
    raise typer.Exit(code=1 if report.skipped else 0)


@app.command("report", help="Write the JSON report and CSV tables from evaluation_report.json")
def report_cmd(config: ConfigOption = None, output_dir: OutputOption = None):
    experiment = _config(config, output_dir=output_dir)
    for path in emit_report(read_report_json(experiment.output_dir), experiment.output_dir):
        typer.echo(str(path))


# noinspection PyShadowingBuiltins
@app.command("config", help="Print or edit the current config")
def config_cmd(
        config: ConfigOption = None,
        print: Annotated[bool, typer.Option("--print", help="Print the current config")] = False,
        edit: Annotated[bool, typer.Option("--edit", help="Edit the config file")] = False,
):
    config_path, raw = load_config(config)
    if print:
        typer.echo(f"Config Path: {config_path}")
        typer.echo(json.dumps(raw, indent=2))
    elif edit:
        raise typer.Exit(code=edit_config(str(config_path)))
    else:
        typer.echo("You must pass one of --print or --edit")
        raise typer.Exit(code=1)


# noinspection PyShadowingBuiltins
@app.command("store", help="Perform actions on the prediction store")
def store_cmd(
        config: ConfigOption = None,
        output_dir: OutputOption = None,
        print: Annotated[bool, typer.Option("--print", help="Print the contents of the prediction store")] = False,
        clear: Annotated[bool, typer.Option("--clear", help="Clear the prediction store")] = False,
        delete: Annotated[str | None, typer.Option(help="Delete every record for the given ticker")] = None,
):
    store_path = _config(config, output_dir=output_dir).output_dir / jsonl_store.PREDICTIONS_FILENAME
    if print:
        logger.info("Prediction store path: %s", store_path)
        headers, table_data = jsonl_store.get_table_data(store_path)
        typer.echo(tabulate(table_data, headers=headers, tablefmt="grid"))
    elif clear:
        confirm = input("This will delete ALL predictions from the store. Are you sure? (y/n): ")
        if confirm.lower() == "y":
            cleared = jsonl_store.clear_store(store_path)
            typer.echo(f"{cleared} records cleared")
    elif delete:
        deleted = jsonl_store.delete_company(store_path, delete)
        typer.echo(f"{deleted} record deleted" if deleted == 1 else f"{deleted} records deleted")
    else:
        typer.echo("You must pass one of --print, --clear, or --delete")
        raise typer.Exit(code=1)
