"""Exception types raised across the package."""


class IfouError(Exception):
    """Base class for all package errors."""


class QuadratureError(IfouError):
    """Raised when a quadrature rule fails to converge.

    Attributes
    ----------
    estimate : float or ndarray
        Estimate at the last refinement level.
    error : float
        Absolute difference between the last two refinement levels.
    """

    def __init__(self, message, estimate, error):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


class FactorizationError(IfouError):
    """Raised when a covariance matrix cannot be factorized even after jitter."""


class DegenerateDataError(IfouError):
    """Raised when the data carry no information (e.g. all increments zero)."""


class InsufficientDataError(IfouError):
    """Raised when there are too few observations for the requested operation."""


class ConfigurationError(IfouError):
    """Raised for inconsistent requests, such as mismatched grids."""


class FormatError(IfouError):
    """Raised when an input file does not follow the expected schema."""


class OptimizationError(IfouError):
    """Raised when the optimizer fails; carries the best point seen so far."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
