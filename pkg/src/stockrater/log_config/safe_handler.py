from logging.handlers import TimedRotatingFileHandler
from pathlib import Path
from typing import Any


class SafeTimedRotatingFileHandler(TimedRotatingFileHandler):
    """Creates the log directory on first use, so a fresh machine can log without setup."""

    def __init__(self, filename: str, *args: Any, **kwargs: Any) -> None:
        Path(filename).parent.mkdir(parents=True, exist_ok=True)
        kwargs.setdefault("encoding", "utf-8")
        super().__init__(filename, *args, **kwargs)
