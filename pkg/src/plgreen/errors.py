"""Exception hierarchy shared by all modules."""


class PLGreenError(Exception):
    """Base class for every error raised by this package."""


# geometry
class DegenerateDomain(PLGreenError):
    pass


class PoleOutsideDomain(PLGreenError):
    pass


class MeshQualityError(PLGreenError):
    """Generated mesh failed one of its declared invariants."""


class EmptyRing(PLGreenError):
    pass


# fields / solver
class MeshMismatch(PLGreenError):
    pass


class InvalidExponent(PLGreenError):
    pass


class NewtonDivergence(PLGreenError):
    pass


class SupercriticalLambda(PLGreenError):
    pass


class PositivityViolation(PLGreenError):
    pass


class EqualArguments(PLGreenError):
    pass


# green construction
class AtPole(PLGreenError):
    pass


class UnresolvedMollifier(PLGreenError):
    pass


class ScheduleTooAggressive(PLGreenError):
    pass


class PoorFit(PLGreenError):
    pass


class NonconvergentQuadrature(PLGreenError):
    pass


class UnresolvedGradient(PLGreenError):
    pass


# regularity
class NonpositiveSigma(PLGreenError):
    pass


class NegativeShiftedField(PLGreenError):
    pass


# convexity
class NegativeField(PLGreenError):
    pass


class DegenerateBase(PLGreenError):
    pass


class HypothesisViolated(PLGreenError):
    pass


# radial oracle
class ShootingDivergence(PLGreenError):
    pass


class QuadratureFailure(PLGreenError):
    pass


# brezis-nirenberg
class UnresolvableEpsilonRange(PLGreenError):
    pass


class NoSignChange(PLGreenError):
    pass


class ZeroField(PLGreenError):
    pass


# cli
class ConfigError(PLGreenError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")
