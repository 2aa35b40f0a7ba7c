"""Exception hierarchy shared by the simulation, estimation and training layers."""


class BatchLoopError(Exception):
    """Base class for all package errors."""


class DomainError(BatchLoopError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ConstraintError(BatchLoopError, ValueError):
    """A control input violates the physical flow bounds."""


class IntegrationError(BatchLoopError, ArithmeticError):
    """The ODE integration produced a non-finite state."""


class LinearizationError(BatchLoopError, ArithmeticError):
    """A finite-difference Jacobian contains non-finite entries."""


class OptimizerError(BatchLoopError, ArithmeticError):
    """An optimizer failed to produce a finite objective or did not converge.

    Attributes
    ----------
    iterate : numpy.ndarray or None
        Last iterate when the failure was detected.
    grad_norm : float or None
        Projected gradient norm at the last iterate.
    """

    def __init__(self, message, iterate=None, grad_norm=None):
        super().__init__(message)
        self.iterate = iterate
        self.grad_norm = grad_norm


class EstimationError(BatchLoopError, ArithmeticError):
    """The Kalman innovation covariance is numerically singular."""


class NumericError(BatchLoopError, ArithmeticError):
    """Network activations or losses became non-finite."""


class ConfigError(BatchLoopError, ValueError):
    """An experiment configuration failed to parse or validate.

    Attributes
    ----------
    path : str
        Dotted path of the offending field, empty for parse errors.
    """

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
