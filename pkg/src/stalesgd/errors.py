"""Exception types shared across the package."""


class StaleSGDError(Exception):
    """Base class for errors raised by this package."""


class ParameterError(StaleSGDError, ValueError):
    """Invalid model, policy, or problem parameters."""


class InputError(StaleSGDError, ValueError):
    """Malformed or empty input data (histograms, traces, files)."""


class NumericError(StaleSGDError, ArithmeticError):
    """A numerical procedure failed to converge or left the float range."""


class NormalizationError(StaleSGDError, ValueError):
    """A step policy cannot be rescaled to the requested mean step."""


class UnsupportedError(StaleSGDError, TypeError):
    """Operation not defined for the given problem or mode."""


class EngineError(StaleSGDError, RuntimeError):
    """A run aborted; ``partial`` holds the trace recorded so far."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
