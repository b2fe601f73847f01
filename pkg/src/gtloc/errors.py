"""Exception types shared across the package.

Each class carries the CLI exit code it maps to, so the command layer can
turn any library failure into a single-line error with a stable status.
"""

from __future__ import annotations


class GTLocError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1
    kind = "error"

    def __init__(self, message: str, origin: str | None = None):
        super().__init__(message)
        self.message = message
        self.origin = origin


class InvalidInputError(GTLocError, ValueError):
    """Argument outside its documented domain."""

    exit_code = 2
    kind = "usage"


class ConfigError(GTLocError, ValueError):
    """Malformed or unknown configuration entries."""

    exit_code = 2
    kind = "usage"


class DataError(GTLocError):
    """Missing, malformed, or inconsistent files and datasets."""

    exit_code = 3
    kind = "data"


class NumericError(GTLocError, ArithmeticError):
    """Non-finite values reached the optimizer or a loss."""

    exit_code = 4
    kind = "numeric"
