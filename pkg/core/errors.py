"""Exception hierarchy shared by the core modules and the CLI."""

from typing import Optional


class CoxError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(CoxError, ValueError):
    """An operation received arguments outside its documented domain."""


class NumericDivergenceError(CoxError, ArithmeticError):
    """A network or optimizer produced non-finite values."""


class ConfigError(CoxError):
    """Configuration file or override could not be accepted."""


class CheckpointError(CoxError):
    """Checkpoint is missing, corrupt or incompatible with the environment."""


class MetricsFormatError(CoxError):
    """A metrics stream line could not be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"第 {line_number} 行: {message}"
        super().__init__(message)
