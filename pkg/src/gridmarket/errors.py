"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented return codes without a lookup table.
"""

from __future__ import annotations


class GridMarketError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ParseError(GridMarketError):
    """An input file could not be read or does not match its schema."""

    exit_code = 1


class ValidationError(GridMarketError, ValueError):
    """Input parsed but violates a model invariant."""

    exit_code = 1


class DimensionMismatch(ValidationError):
    pass


class UnbalancedInjection(ValidationError):
    pass


class MechanismStateMismatch(ValidationError):
    pass


class UnknownColumn(ValidationError):
    pass


class MalformedCsv(ParseError):
    pass


class NumericalError(GridMarketError):
    """A numerical routine failed or produced an unusable result."""

    exit_code = 3


class NonFiniteState(NumericalError):
    pass


class ProjectionBoundary(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    pass


class Infeasible(NumericalError):
    pass


class MaxIterations(NumericalError):
    def __init__(self, message: str, best_residual: float):
        super().__init__(f"{message} (best residual {best_residual:.3e})")
        self.best_residual = best_residual
