"""Contextual MDP toolkit: measures, tabular CEBE solvers, differentiable
environments, context sample enhancement, stability bounds and a tabular
training harness."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    BoundViolated,
    CMDPError,
    ConfigInvalid,
    ContextOutOfRange,
    DimensionMismatch,
    DomainError,
    EmptyBuffer,
    InvalidContext,
    PerturbationTooLarge,
    PremiseViolated,
    SingularSystem,
    SupportMismatch,
    UnreachableGoal,
    ZeroPositivePart,
)
