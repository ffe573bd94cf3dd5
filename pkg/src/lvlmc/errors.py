"""Exception types raised across the package."""


class LvlmcError(Exception):
    """Base class for all package errors."""


class InvariantError(LvlmcError, ValueError):
    """A matrix or table violates the invariants of its declared type."""


class NotSPDError(InvariantError):
    """A matrix expected to be symmetric positive definite is not."""


class DimensionError(LvlmcError, ValueError):
    """Operands have incompatible shapes."""


class ConvergenceError(LvlmcError, RuntimeError):
    """An iterative solver hit its iteration cap.

    Attributes
    ----------
    iterate : ndarray
        Last iterate reached by the solver.
    residual : float
        Residual norm at ``iterate``.
    """

    def __init__(self, message, iterate=None, residual=float("nan")):
        super().__init__(message)
        self.iterate = iterate
        self.residual = residual


class OptimizationError(LvlmcError, RuntimeError):
    """Fiber descent failed to decrease its objective."""


class DegenerateError(LvlmcError, ValueError):
    """Data carries no spread (constant variable, identical values)."""


class DegenerateVariableError(DegenerateError):
    """A variable is constant inside a neighborhood."""

    def __init__(self, variable, sample=None):
        where = "" if sample is None else f" around sample {sample}"
        super().__init__(f"variable {variable!r} is constant{where}")
        self.variable = variable
        self.sample = sample


class FitError(LvlmcError, RuntimeError):
    """Variogram model fitting failed."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class KrigingError(LvlmcError, RuntimeError):
    """The kriging system could not be solved."""


class StageError(LvlmcError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class CappedQueryWarning(UserWarning):
    """A k-NN query asked for more neighbors than there are samples."""
