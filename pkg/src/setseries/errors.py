"""Exception types shared across the package."""


class SetSeriesError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SetSeriesError):
    """Input data violates a documented invariant."""


class ParseError(ValidationError):
    """A dataset file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(SetSeriesError):
    """Array dimensions do not match the declared contract."""


class ConfigError(SetSeriesError):
    """A specification or configuration value is invalid."""


class StateError(SetSeriesError):
    """An object was used in a state it does not support."""


class StreamOrderError(ValidationError):
    """An online event stream violated monotone time ordering."""


class MetricUndefinedError(SetSeriesError):
    """The requested metric is undefined for the given label distribution."""


class CompatibilityError(SetSeriesError):
    """A checkpoint and a dataset were prepared with different metadata."""


class DivergenceError(SetSeriesError):
    """Training produced a non-finite loss."""
