import json
import logging
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import platformdirs
from jsonschema import FormatChecker, ValidationError


def _load_resource_json(name: str) -> dict[str, Any]:
    path = resources.files("stockrater") / "resources" / name
    with path.open("r") as f:
        return json.load(f)


# Constants
APP_NAME = "stock-rater"
CONFIG_SCHEMA = _load_resource_json("config_schema.json")
PREDICTION_SCHEMA = _load_resource_json("prediction_schema.json")
UNIVERSE_SCHEMA = _load_resource_json("universe_schema.json")
SCHEMA_VERSION = 1
SUPPORTED_HORIZONS = (1, 3, 6, 12, 18)
# Gateway settings that change how requests are sent but not what is asked
GATEWAY_RUNTIME_KEYS = frozenset({"concurrency", "timeout_seconds", "max_retries", "backoff_seconds"})

# Environment variables
SR_LOGS_DIR = "STOCKRATER_LOGS_DIR"
SR_CONFIG_DIR = "STOCKRATER_CONFIG_DIR"
SR_API_KEY = "STOCKRATER_API_KEY"

# Regex for a year and month e.g. 2022-01
YEAR_MONTH_RE = re.compile(r"^(?P<year>\d{4})-(?P<month>0[1-9]|1[0-2])$")

format_checker = FormatChecker()

logger = logging.getLogger(__name__)


@format_checker.checks("year-month")
def is_year_month_format(value: str) -> bool:
    return bool(YEAR_MONTH_RE.fullmatch(value))


def default_config_file_path() -> Path:
    default_config_dir = platformdirs.user_config_dir(APP_NAME, appauthor=False)
    return Path(os.getenv(SR_CONFIG_DIR, default_config_dir)) / "config.json"


def load_config(config_file_path: Path | None = None) -> tuple[Path, dict[str, Any]]:
    if config_file_path is None:
        config_file_path = default_config_file_path()
        if not config_file_path.exists():
            logger.info("config.json not found, so creating default")
            config_file_path.parent.mkdir(exist_ok=True, parents=True)
            default_config = resources.files("stockrater") / "resources" / "default_config.json"
            with default_config.open("rb") as src, open(config_file_path, "wb") as dst:
                dst.write(src.read())
            logger.info("Created default config.json at: %s", config_file_path)

    with open(config_file_path, "r") as f:
        logger.info("Loading config from: %s", config_file_path)
        try:
            config = json.loads(f.read())
        except json.decoder.JSONDecodeError as e:
            raise ValueError(f"Failed to load config: {e}") from e
        logger.debug("Loaded config: %s", config)

    validate_config(config)

    debug_logging = config.get("debug_logging", False)
    if debug_logging:
        update_log_level("file", logging.DEBUG)
    logger.info("DEBUG level logging %s", "enabled" if debug_logging else "disabled")
    return config_file_path, config


def validate_config(config: dict[str, Any]) -> None:
    try:
        jsonschema.validate(instance=config, schema=CONFIG_SCHEMA, format_checker=format_checker)
    except ValidationError as e:
        raise ValueError(f"Invalid config: {e.message}") from e
    if config["start_month"] > config["end_month"]:
        raise ValueError(f"Invalid config: start_month [{config['start_month']}] is after end_month [{config['end_month']}]")


def update_log_level(handler_name: str, level: int | str) -> None:
    for handler in logging.getLogger().handlers:
        if handler.get_name() == handler_name:
            handler.setLevel(level)
            break


@dataclass(frozen=True)
class GatewaySettings:
    backend: str = "mock"
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4-32k-0613"
    temperature: float = 0.0
    max_output_tokens: int = 2048
    max_retries: int = 5
    concurrency: int = 4
    timeout_seconds: float = 120.0
    backoff_seconds: float = 1.0
    context_budget_tokens: int = 24000


@dataclass(frozen=True)
class ExperimentConfig:
    universe: Path
    prices: Path
    method: str
    start_month: str
    end_month: str
    output_dir: Path
    news: Path | None = None
    analyst_ratings: Path | None = None
    fundamentals: Path | None = None
    metric_definitions: Path | None = None
    horizons: tuple[int, ...] = SUPPORTED_HORIZONS
    seed: int = 0
    max_roll_days: int = 7
    gateway: GatewaySettings = field(default_factory=GatewaySettings)
    cove_on_mismatch: str = "retry"
    max_articles_per_call: int | None = None
    template_dir: Path | None = None
    few_shot: bool = True
    rating_synonyms: dict[str, int] = field(default_factory=dict)
    raw: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, config: dict[str, Any], base_dir: Path) -> "ExperimentConfig":
        """Builds the config from an already validated dict, resolving paths against base_dir."""

        def _path(value: str | None) -> Path | None:
            if value is None:
                return None
            path = Path(value).expanduser()
            return path if path.is_absolute() else (base_dir / path)

        data = config.get("data", {})
        prompts = config.get("prompts", {})
        return cls(
            universe=_path(config["universe"]),
            prices=_path(data["prices"]),
            news=_path(data.get("news")),
            analyst_ratings=_path(data.get("analyst_ratings")),
            fundamentals=_path(data.get("fundamentals")),
            metric_definitions=_path(config.get("fundamentals", {}).get("metric_definitions")),
            method=config["method"],
            start_month=config["start_month"],
            end_month=config["end_month"],
            horizons=tuple(sorted(config.get("horizons", SUPPORTED_HORIZONS))),
            output_dir=_path(config["output_dir"]),
            seed=config.get("seed", 0),
            max_roll_days=config.get("max_roll_days", 7),
            gateway=GatewaySettings(**config.get("gateway", {})),
            cove_on_mismatch=config.get("cove", {}).get("on_mismatch", "retry"),
            max_articles_per_call=config.get("news", {}).get("max_articles_per_call"),
            template_dir=_path(prompts.get("template_dir")),
            few_shot=prompts.get("few_shot", True),
            rating_synonyms=dict(config.get("ratings", {}).get("synonyms", {})),
            raw=config,
        )

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """Returns a copy with CLI overrides applied to both the typed fields and the raw dict."""
        raw = json.loads(json.dumps(self.raw))
        values = {k: v for k, v in overrides.items() if v is not None}
        for key, value in values.items():
            raw[key] = str(value) if isinstance(value, Path) else (list(value) if isinstance(value, tuple) else value)
        validate_config(raw)
        fields = {k: v for k, v in self.__dict__.items()}
        fields.update(values)
        fields["raw"] = raw
        return ExperimentConfig(**fields)

    def digest(self) -> str:
        """Identifies the predictions a config produces; output location, logging and gateway runtime settings do not count."""
        from stockrater.utils import digest
        raw = {k: v for k, v in self.raw.items() if k not in ("output_dir", "debug_logging")}
        if "gateway" in raw:
            raw["gateway"] = {k: v for k, v in raw["gateway"].items() if k not in GATEWAY_RUNTIME_KEYS}
        return digest(raw)
