"""Hierarchical KF-ILC informer and informer-guided PPO for a batch reactor."""

from .errors import (
    BatchLoopError,
    ConfigError,
    ConstraintError,
    DomainError,
    EstimationError,
    IntegrationError,
    LinearizationError,
    NumericError,
    OptimizerError,
)

__version__ = "0.1.0"

__all__ = [
    "BatchLoopError",
    "ConfigError",
    "ConstraintError",
    "DomainError",
    "EstimationError",
    "IntegrationError",
    "LinearizationError",
    "NumericError",
    "OptimizerError",
    "__version__",
]
