"""Exception types shared across the package."""


class FedBayesError(Exception):
    """Base class for all package errors."""


class ParameterError(FedBayesError, ValueError):
    """Invalid model or mechanism parameter."""


class RangeError(FedBayesError, ValueError):
    """Input outside the domain a mechanism accepts."""


class OrderError(FedBayesError, ValueError):
    """Renyi order outside (1, inf)."""


class NoBudgetError(FedBayesError, ValueError):
    """An RDP curve that is infinite on the whole search grid."""


class ConfigError(FedBayesError, ValueError):
    """Malformed experiment configuration."""


class DivergenceError(FedBayesError, ArithmeticError):
    """An iterative algorithm produced a non-finite loss or state."""

    def __init__(self, message, iteration=None, state=None):
        super().__init__(message)
        self.iteration = iteration
        self.state = state or {}
