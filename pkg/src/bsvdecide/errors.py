"""Exception hierarchy shared by all modules."""


class BsvError(Exception):
    """Base class for errors raised by bsvdecide."""


class DimensionError(BsvError, ValueError):
    """Array or set dimensions do not agree."""


class ConvergenceError(BsvError, RuntimeError):
    """An iterative projection did not converge (possibly empty intersection)."""


class NonFiniteError(BsvError, FloatingPointError):
    """A computation produced NaN or inf.

    ``location`` carries whatever index identifies the offending entry,
    e.g. ``(path, step)`` or a grid node.
    """

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{message} at {location}")
        self.location = location


class SingularRegressionError(BsvError, ArithmeticError):
    """Regression normal equations are too ill-conditioned to solve."""

    def __init__(self, message, step=None, condition=None):
        super().__init__(message)
        self.step = step
        self.condition = condition


class ResampleBudgetExceeded(BsvError, RuntimeError):
    """Too many sampled points fell where the Hessian estimate is unreliable."""


class CflViolation(BsvError, ValueError):
    """Explicit time step exceeds the stability bound."""


class FixedPointDivergence(BsvError, RuntimeError):
    """Inner fixed-point iteration of the semi-implicit scheme diverged."""


class ModeMismatch(BsvError, ValueError):
    """Requested policy mode was not computed and cannot be recomputed."""


class ConfigError(BsvError, ValueError):
    """Experiment configuration failed validation."""
