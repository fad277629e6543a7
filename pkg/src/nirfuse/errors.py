"""Exception types shared across the package.

The CLI maps each family to a process exit code.
"""


class NirfuseError(Exception):
    """Base class for all errors raised by nirfuse."""


class ShapeError(NirfuseError, ValueError):
    """Tensor shapes are incompatible with an operation or a parameter set."""


class TapeError(NirfuseError, RuntimeError):
    """Misuse of the gradient tape (foreign tensor, double backward, ...)."""


class ConfigError(NirfuseError, ValueError):
    """Invalid configuration key or value."""


class DataError(NirfuseError, OSError):
    """Unreadable, missing or malformed input data."""


class NumericalError(NirfuseError, ArithmeticError):
    """Non-finite values or a failed numerical check."""
