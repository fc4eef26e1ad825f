"""Exception types shared across the package."""


class HarvestJamError(Exception):
    """Base class for all package errors."""


class ConfigError(HarvestJamError, ValueError):
    """Raised for malformed or inconsistent experiment configuration."""


class ModelValidationError(HarvestJamError, ValueError):
    """Raised when a model component violates its invariants."""


class ConvergenceError(HarvestJamError, RuntimeError):
    """Raised when an iterative solver does not converge within its budget."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class DivergenceError(HarvestJamError, RuntimeError):
    """Raised when a learner produces non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
