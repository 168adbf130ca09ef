"""Exception and warning types raised across the package."""


class SmallScatError(Exception):
    """Base class for all package errors."""


class InvalidMeshError(SmallScatError):
    pass


class ResonanceError(SmallScatError):
    """The effective-capacitance denominator is (numerically) zero."""

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


class DomainError(SmallScatError):
    pass


class SolverError(SmallScatError):
    """A linear solve failed or did not reach its residual target."""

    def __init__(self, message, residual=None, condition=None):
        super().__init__(message)
        self.residual = residual
        self.condition = condition


class DominanceError(SmallScatError):
    def __init__(self, message, ratio=None):
        super().__init__(message)
        self.ratio = ratio


class ConvergenceError(SmallScatError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConfigurationError(SmallScatError):
    pass


class InfeasibleDesignError(SmallScatError):
    def __init__(self, message, interval=None, indices=None):
        super().__init__(message)
        self.interval = interval
        self.indices = indices


class PlacementError(SmallScatError):
    pass


class RegimeWarning(UserWarning):
    """A formula is being evaluated outside its small-particle validity regime."""
