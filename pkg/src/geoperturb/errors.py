"""Exception hierarchy shared by all geoperturb modules."""

from __future__ import annotations


class GeoPerturbError(Exception):
    """Base class for every error raised by the package."""


class DomainError(GeoPerturbError):
    pass


class DegenerateMetric(GeoPerturbError):
    pass


class SingularMetric(GeoPerturbError):
    pass


class NonSmoothAtVector(GeoPerturbError):
    pass


class DomainEscape(GeoPerturbError):
    def __init__(self, message: str, exit_point=None):
        super().__init__(message)
        self.exit_point = exit_point


class StepTooLarge(GeoPerturbError):
    pass


class NormalFieldFlip(GeoPerturbError):
    pass


class TooFewNodes(GeoPerturbError):
    pass


class NotOrthonormal(GeoPerturbError):
    pass


class BoundViolation(GeoPerturbError):
    pass


class InverseDiverged(GeoPerturbError):
    def __init__(self, message: str, worst_point=None):
        super().__init__(message)
        self.worst_point = worst_point


class FlowEscape(GeoPerturbError):
    pass


class JacobianIllConditioned(GeoPerturbError):
    pass


class NotParallelForm(GeoPerturbError):
    pass


class NonTransversalContact(GeoPerturbError):
    pass


class GeometricallyEquivalent(GeoPerturbError):
    pass


class SeedSearchFailed(GeoPerturbError):
    pass


class DimensionTooLow(GeoPerturbError):
    pass


class NoIntersectionCurve(GeoPerturbError):
    pass


class MonotonicityLost(GeoPerturbError):
    pass


class EpsilonExhausted(GeoPerturbError):
    pass


class OffsetSelectionFailed(GeoPerturbError):
    pass


class NoConvergence(GeoPerturbError):
    pass


class FramePropagationFailed(GeoPerturbError):
    pass


class BallOverlapUnresolvable(GeoPerturbError):
    pass


class ConfigError(GeoPerturbError):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field
