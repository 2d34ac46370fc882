"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class MarginEngineError(Exception):
    """Base class for domain errors surfaced to callers and the CLI."""


class PriceParseError(MarginEngineError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PriceValidationError(PriceParseError):
    pass


class InsufficientHistoryError(MarginEngineError, ValueError):
    def __init__(self, message: str, required: int):
        self.required = required
        super().__init__(message)


class MarkovTestUndefinedError(MarginEngineError, ValueError):
    pass


class InadequateMarginError(MarginEngineError, ValueError):
    """Initial margin fails the adequacy condition m0 + 1 >= w."""


class EnumerationSizeError(MarginEngineError, ValueError):
    pass
