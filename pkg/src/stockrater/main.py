import logging.config
import sys

from stockrater.cli import app
from stockrater.config import APP_NAME
from stockrater.error_handler import setup_uncaught_exception_handler
from stockrater.errors import StockRaterError, TaskInterrupted
from stockrater.log_config.fallback_logger import setup_fallback_logging
from stockrater.log_config.logging_config import LOGGING_CONFIG

logger = logging.getLogger(__name__)
setup_fallback_logging()
setup_uncaught_exception_handler()
logging.config.dictConfig(LOGGING_CONFIG)

EXIT_PARTIAL = 1
EXIT_FATAL = 2


def main():
    # noinspection PyBroadException
    try:
        logger.info("%s called with arguments: %s", APP_NAME, sys.argv[1:])
        app(prog_name=APP_NAME)
    except TaskInterrupted as e:
        logger.warning(e.message)
        sys.exit(EXIT_PARTIAL)
    except StockRaterError as e:
        logger.error(e.message)
        sys.exit(EXIT_FATAL)
    except (OSError, ValueError) as e:
        logger.error(e)
        sys.exit(EXIT_FATAL)
    except Exception:
        logger.exception("Unhandled exception")
        sys.exit(EXIT_FATAL)


if __name__ == "__main__":
    main()
