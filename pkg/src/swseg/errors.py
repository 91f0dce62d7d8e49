"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes, so library code should raise the
most specific class that applies.
"""


class SwsegError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(SwsegError, ValueError):
    """Invalid hyperparameter, setting, or option value."""

    exit_code = 1


class ShapeError(SwsegError, ValueError):
    """Tensor or mask dimensions are incompatible."""

    exit_code = 1


class DataError(SwsegError):
    """Input data is missing, unreadable, or malformed."""

    exit_code = 2


class CheckpointError(DataError):
    """Checkpoint file has the wrong magic/version or does not match a model."""


class NumericError(SwsegError, ArithmeticError):
    """A loss, gradient, or objective became non-finite."""

    exit_code = 3


class UndefinedMetricError(SwsegError, ValueError):
    """A metric is undefined for the given inputs (e.g. empty boundary)."""
