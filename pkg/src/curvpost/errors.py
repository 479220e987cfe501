"""Exception types shared across the package."""


class CurvpostError(Exception):
    """Base class for all package-specific failures."""


class ShapeMismatchError(CurvpostError, ValueError):
    """An array does not have the shape an operation requires.

    The message names the offending layer or argument.
    """


class BudgetExceededError(CurvpostError, RuntimeError):
    """A dense materialization would exceed the configured entry budget."""


class ConfigError(CurvpostError, ValueError):
    """An experiment configuration is malformed or inconsistent."""


class DivergenceError(CurvpostError, RuntimeError):
    """Training produced a non-finite loss; carries the loss trace."""

    def __init__(self, message, loss_trace=None):
        super().__init__(message)
        self.loss_trace = list(loss_trace) if loss_trace is not None else []


class SamplerError(CurvpostError, RuntimeError):
    """A posterior sampler failed; carries the index of the failing sample."""

    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index
