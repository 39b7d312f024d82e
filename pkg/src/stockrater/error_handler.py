import logging
import sys
import types

logger = logging.getLogger(__name__)


def log_uncaught_exceptions(exc_type: type[BaseException], exc_value: BaseException, exc_traceback: types.TracebackType | None) -> None:
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_traceback)
        return
    logger.critical("Uncaught exception in stock-rater", exc_info=(exc_type, exc_value, exc_traceback))


def setup_uncaught_exception_handler() -> None:
    sys.excepthook = log_uncaught_exceptions
