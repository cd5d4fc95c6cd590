"""Exception hierarchy shared by all solver modules."""


class ViableMFGError(Exception):
    """Base class for errors raised by this package."""


class GeometryError(ViableMFGError):
    pass


class EmptyDomain(GeometryError):
    pass


class BlendInfeasible(GeometryError):
    pass


class ModelError(ViableMFGError):
    pass


class NonConvexCost(ModelError):
    pass


class GrowthViolation(ModelError):
    pass


class SolverError(ViableMFGError):
    pass


class CFLViolation(SolverError):
    pass


class SolverDiverged(SolverError):
    pass


class NegativeDensity(SolverError):
    pass


class DriftUnboundedOnMask(SolverError):
    pass


class GridMismatch(SolverError):
    pass


class DriftMismatch(SolverError):
    pass


class NotConverged(SolverError):
    """Raised by strict callers; carries the best iterate in ``solution``."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class InvarianceFailed(ViableMFGError):
    pass


class NoStoredPaths(ViableMFGError):
    pass


class OutOfGrid(ViableMFGError):
    pass


class ConfigInvalid(ViableMFGError):
    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line
