"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code (see :mod:`sparsefeat.cli`).
"""


class SparseFeatError(Exception):
    """Base class for all package errors."""


class ConfigError(SparseFeatError, ValueError):
    """Inconsistent architecture, protocol or run configuration."""


class DimensionError(ConfigError):
    """Array shapes that cannot be combined (kernel larger than input, ...)."""


class ParameterError(ConfigError):
    """A hyperparameter outside its valid range."""


class LabelError(ConfigError):
    """Class label outside ``[0, n_classes)``."""


class FormatError(SparseFeatError, ValueError):
    """Malformed data or model file."""


class NumericError(SparseFeatError, FloatingPointError):
    """Non-finite values appeared during a computation."""


class TrainingError(SparseFeatError, RuntimeError):
    """Training could not make progress (e.g. every sample was skipped)."""
