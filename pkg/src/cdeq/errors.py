"""Exception hierarchy shared by every cdeq module."""


class CDEQError(Exception):
    """Base class for all errors raised by cdeq."""


class ValidationError(CDEQError, ValueError):
    """Bad user input: shapes, ranges, config keys, missing files."""


class ShapeError(ValidationError):
    pass


class NumericalError(CDEQError, ArithmeticError):
    """A computation produced NaN/Inf or could not be carried out stably."""


class IllConditionedError(NumericalError):
    pass


class DegenerateStateError(NumericalError):
    pass


class DivergenceError(NumericalError):
    """A solve or training run blew up. ``diagnostics`` carries whatever was recorded."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CacheError(ValidationError):
    """Unreadable, corrupted, or version-mismatched on-disk artifact."""
