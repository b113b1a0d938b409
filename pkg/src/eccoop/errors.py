"""Exception hierarchy shared by every module of the package."""


class EccoopError(Exception):
    """Base class for all package errors."""


class SchemaError(EccoopError):
    """A case file is malformed (missing section, wrong type, bad series reference)."""


class ValidationError(EccoopError):
    """A case violates a data invariant.

    ``invariant`` names the violated rule so callers can report it verbatim.
    """

    def __init__(self, invariant: str, message: str):
        self.invariant = invariant
        super().__init__(f"[{invariant}] {message}")


class TopologyError(EccoopError):
    """The line set is not a connected radial tree rooted at the slack bus."""


class DomainError(EccoopError, ValueError):
    pass


class DimensionError(EccoopError, ValueError):
    pass


class InactiveCommunityError(EccoopError, KeyError):
    pass


class MissingScheduleError(EccoopError):
    pass


class InfeasibleTopologyError(EccoopError):
    pass


class UnhousedVariableError(EccoopError):
    pass


class BackendError(EccoopError):
    """The solving engine failed for reasons unrelated to the model itself."""


class InfeasibleError(EccoopError):
    pass


class UnboundedError(EccoopError):
    pass


class SolveLimitError(EccoopError):
    """A time or node limit stopped the solve before optimality was proven."""


class BigMSaturatedError(EccoopError):
    """A complementarity multiplier or slack landed within 0.1% of the Big-M constant."""

    def __init__(self, big_m: float, worst: float, where: str):
        self.big_m = big_m
        self.worst = worst
        self.where = where
        super().__init__(f"Big-M {big_m:g} saturated by {where} (value {worst:.6g})")


class AuditError(EccoopError):
    """A solved coalition failed its post-solve residual audit."""


class IncompleteTableError(EccoopError):
    pass


class ZeroCapacityError(EccoopError, ValueError):
    pass
