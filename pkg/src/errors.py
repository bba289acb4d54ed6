"""
Errors - Exception hierarchy for the affect alignment toolkit.

Every failure raised on purpose by this package derives from AffectAlignError,
so callers (and the CLI) can tell expected runtime failures apart from bugs.
"""

from typing import Optional


class AffectAlignError(Exception):
    """Base class for all package errors."""


class ConfigError(AffectAlignError):
    """Invalid configuration values."""


class DimensionError(AffectAlignError):
    """Shapes of the operands do not agree."""


class ArgumentError(AffectAlignError):
    """An argument is outside its allowed domain."""


class DataError(AffectAlignError):
    """Input data violates a content invariant (e.g. a zero-norm embedding row)."""


class ParseError(AffectAlignError):
    """A file could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        location = ""
        if path:
            location += f"{path}"
        if line is not None:
            location += f":{line}" if location else f"line {line}"
        super().__init__(f"{location}: {message}" if location else message)


class NumericError(AffectAlignError):
    """Non-finite values, failed convergence or a diverging loss."""

    def __init__(self, message: str, residual: Optional[float] = None,
                 batch_id: Optional[int] = None):
        self.residual = residual
        self.batch_id = batch_id
        super().__init__(message)


class DegenerateInputError(AffectAlignError):
    """The CCC denominator vanished for one affect dimension."""

    def __init__(self, message: str, dimension: Optional[str] = None):
        self.dimension = dimension
        super().__init__(message)
