"""Exception hierarchy shared across the package."""


class StationaryGradError(Exception):
    """Base class for all package errors."""


class ConfigError(StationaryGradError, ValueError):
    """A run configuration failed to parse or validate."""


class ModelConditionError(StationaryGradError, ValueError):
    """A model precondition (contraction bound, parameter region, ...) is violated."""


class ParameterRegionError(ModelConditionError):
    """A parameter value lies outside the model's declared parameter region."""


class NumericalError(StationaryGradError, ArithmeticError):
    """Non-finite values or another numerical breakdown during a computation."""

    def __init__(self, message, step=None, point=None):
        super().__init__(message)
        self.step = step
        self.point = point


class MissingDerivativeError(StationaryGradError, NotImplementedError):
    """The model does not provide a derivative required by the caller."""


class NormUnsupportedError(StationaryGradError, ValueError):
    """An induced norm cannot be computed exactly for the requested norm kinds or size."""
