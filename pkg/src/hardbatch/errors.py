"""Exception hierarchy shared by every part of the engine."""


class HardBatchError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(HardBatchError, ValueError):
    """Invalid hyper-parameters or structural settings."""


class ShapeError(HardBatchError, ValueError):
    """Array dimensions do not line up."""


class DataError(HardBatchError, ValueError):
    """Dataset contents violate an invariant (label range, counts, ...)."""


class ParseError(DataError):
    """A text input could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(DataError):
    """A binary container (IDX) is malformed or truncated."""


class DivergenceError(HardBatchError, ArithmeticError):
    """Training produced a non-finite loss.

    ``diagnostic`` carries where it happened so callers can keep partial
    artifacts around.
    """

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = dict(diagnostic or {})


class ComparisonError(HardBatchError, ValueError):
    """Runs that are being compared were not configured alike."""


class UsageError(HardBatchError):
    """Bad command-line usage."""
