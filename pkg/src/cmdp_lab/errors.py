"""Exception types shared across the package."""


class CMDPError(Exception):
    """Base class for all errors raised by cmdp_lab."""


class DomainError(CMDPError, ValueError):
    """A numerical-domain failure (bad context, projection undefined, ...)."""


class ZeroPositivePart(DomainError):
    pass


class PerturbationTooLarge(DomainError):
    pass


class SupportMismatch(CMDPError, ValueError):
    pass


class DimensionMismatch(CMDPError, ValueError):
    pass


class SingularSystem(DomainError):
    pass


class InvalidContext(DomainError):
    pass


class ContextOutOfRange(DomainError):
    pass


class UnreachableGoal(InvalidContext):
    pass


class PremiseViolated(DomainError):
    """The hypotheses of a bound do not hold, so the bound asserts nothing."""


class BoundViolated(CMDPError, AssertionError):
    """A proven bound failed numerically; always an implementation bug."""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


class EmptyBuffer(CMDPError, IndexError):
    pass


class ConfigInvalid(CMDPError, ValueError):
    pass
