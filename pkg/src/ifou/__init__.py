"""Integral fractional Ornstein-Uhlenbeck process: simulation, fitting and forecasting."""

from .errors import (
    ConfigurationError,
    DegenerateDataError,
    FactorizationError,
    FormatError,
    IfouError,
    InsufficientDataError,
    OptimizationError,
    QuadratureError,
)
from .kernels import InitialState, ModelParams, TimeGrid, Trajectory
from .quadrature import DEFAULT_CONFIG, QuadratureConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DEFAULT_CONFIG",
    "DegenerateDataError",
    "FactorizationError",
    "FormatError",
    "IfouError",
    "InitialState",
    "InsufficientDataError",
    "ModelParams",
    "OptimizationError",
    "QuadratureConfig",
    "QuadratureError",
    "TimeGrid",
    "Trajectory",
    "__version__",
]
