from collections.abc import Iterable


class StockRaterError(Exception):
    """Base class for every error raised by stock-rater."""

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


class TaskInterrupted(StockRaterError):
    """Raised to indicate cooperative shutdown."""


class DataError(StockRaterError):
    """Input data is missing, malformed or does not cover the requested dates."""


class NoSeries(DataError):
    pass


class NoTradingDate(DataError):
    pass


class InsufficientHistory(DataError):
    def __init__(self, instrument_id: str, windows: Iterable[str]) -> None:
        self.instrument_id = instrument_id
        self.windows = tuple(windows)
        super().__init__(f"Insufficient history for [{instrument_id}] in window(s): {', '.join(self.windows)}")


class TooFewCompanies(StockRaterError):
    def __init__(self, found: int, required: int) -> None:
        self.found = found
        self.required = required
        super().__init__(f"Need at least [{required}] companies with returns, found [{found}]")


class OutOfRange(StockRaterError):
    pass


class KeyMismatch(StockRaterError):
    pass


class UnknownTerm(StockRaterError):
    def __init__(self, term: str) -> None:
        self.term = term
        super().__init__(f"Unknown rating term [{term}]")


class EmptyBundle(StockRaterError):
    pass


class UnparsableSentiment(StockRaterError):
    def __init__(self, replies: Iterable[str]) -> None:
        self.replies = tuple(replies)
        super().__init__(f"Could not parse an integer sentiment in [-5, 5] from replies: {list(self.replies)}")


class NoFilings(StockRaterError):
    pass


class LookaheadError(StockRaterError):
    pass


class MissingInput(StockRaterError):
    pass


class ExtraInput(StockRaterError):
    pass


class GatewayError(StockRaterError):
    pass


class BackendUnavailable(GatewayError):
    pass


class ContextOverflow(GatewayError):
    pass


class MalformedResponse(StockRaterError):
    def __init__(self, message: str, raw: str) -> None:
        super().__init__(message)
        self.raw = raw


class LengthMismatch(StockRaterError):
    pass


class EmptyInput(StockRaterError):
    pass


class Degenerate(StockRaterError):
    pass


class MissingHorizon(StockRaterError):
    pass


class EmptyUniverse(StockRaterError):
    pass


class EmptyDateRange(StockRaterError):
    pass
