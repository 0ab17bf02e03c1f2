"""Exception hierarchy shared by all modules."""


class RobustCovError(Exception):
    """Base class for package errors."""


class InvalidInputError(RobustCovError, ValueError):
    """Input array has the wrong shape, is asymmetric or contains non-finite values."""


class NearSingularError(RobustCovError, ValueError):
    """Matrix is too close to singular for the requested operation."""


class RejectedSampleError(RobustCovError, ValueError):
    """A sample has no observed entry."""


class ConfigurationError(RobustCovError, ValueError):
    """Infeasible or inconsistent configuration."""


class ConditioningError(RobustCovError, ArithmeticError):
    """Observed block of the covariance is numerically singular for a sample."""

    def __init__(self, sample, message=None):
        self.sample = sample
        super().__init__(message or f"observed covariance block is singular for sample {sample}")


class NumericalError(RobustCovError, ArithmeticError):
    """Iteration produced non-finite values."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite values at iteration {iteration}")


class ConvergenceError(RobustCovError, ArithmeticError):
    """Iterative estimator failed to reach its tolerance."""

    def __init__(self, residual, message=None):
        self.residual = residual
        super().__init__(message or f"no convergence, residual {residual:.3e}")
