import logging.config
from collections.abc import Callable, Sequence
from pathlib import Path

import pytest
from pytest import MonkeyPatch
from pytest_mock import MockerFixture
from typer.testing import CliRunner

from stockrater.config import ExperimentConfig, GatewaySettings, load_config
from stockrater.gateway import ChatGateway, MockChatBackend
from stockrater.log_config import logging_config
from test_helpers import SyntheticMarket, write_synthetic_market


@pytest.fixture(autouse=True)
def override_logging_config(monkeypatch: MonkeyPatch) -> None:
    test_logging_config = {
        "version": 1,
        "formatters": {
            "default": {
                "format": "%(asctime)s.%(msecs)03d %(thread)d [%(levelname)s] %(name)s: %(message)s",
            }
        },
        "handlers": {
            "console": {
                "class": "logging.StreamHandler",
                "formatter": "default",
                "level": "DEBUG",
                "stream": "ext://sys.stdout",
            }
        },
        "root": {
            "handlers": ["console"],
            "level": "DEBUG",
        },
        "disable_existing_loggers": False,
    }

    monkeypatch.setattr(logging_config, "LOGGING_CONFIG", test_logging_config)
    logging.config.dictConfig(test_logging_config)


@pytest.fixture(autouse=True)
def isolated_config_dir(monkeypatch: MonkeyPatch, tmp_path: Path) -> Path:
    """Keeps the default config location out of the real user config dir."""
    config_dir = tmp_path / "user-config"
    monkeypatch.setenv("STOCKRATER_CONFIG_DIR", str(config_dir))
    return config_dir


@pytest.fixture
def synthetic_market(tmp_path: Path) -> SyntheticMarket:
    return write_synthetic_market(tmp_path / "market")


@pytest.fixture
def experiment_config(synthetic_market: SyntheticMarket) -> ExperimentConfig:
    path, raw = load_config(synthetic_market.config_path)
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


@pytest.fixture
def mock_config_path(mocker: MockerFixture, monkeypatch: MonkeyPatch, tmp_path: Path) -> Path:
    monkeypatch.delenv("STOCKRATER_CONFIG_DIR", raising=False)
    mock = mocker.patch("stockrater.config.platformdirs.user_config_dir", return_value=str(tmp_path / "mock-config"))
    return Path(mock.return_value)


@pytest.fixture
def gateway_factory() -> Callable[..., ChatGateway]:
    """Builds a gateway over a mock backend; a script makes the replies fixed and ordered."""

    def _create_gateway(script: Sequence[str] | None = None, seed: int = 0, transcript_path: Path | None = None,
                        **settings) -> ChatGateway:
        if script is not None:
            settings.setdefault("concurrency", 1)
        return ChatGateway(MockChatBackend(script=script, seed=seed), GatewaySettings(**settings), transcript_path)

    return _create_gateway


@pytest.fixture
def cli_runner() -> CliRunner:
    return CliRunner()
