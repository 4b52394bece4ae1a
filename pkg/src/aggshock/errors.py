"""Exception taxonomy.

Two branches matter operationally: :class:`DataError` covers malformed or
inconsistent input (CLI exit code 2), :class:`NumericalError` covers
well-formed input on which the requested computation is degenerate or fails
to converge (CLI exit code 3).
"""

from __future__ import annotations


class AggshockError(Exception):
    """Base class for all package-specific errors."""


class DataError(AggshockError):
    """Input data is malformed, inconsistent, or violates a precondition."""


class NumericalError(AggshockError):
    """Computation is degenerate or failed on otherwise valid input."""


# -- data errors --------------------------------------------------------------


class UnbalancedPanel(DataError):
    """Some unit/time cell of the panel is missing."""


class DuplicateCell(DataError):
    """A unit/time cell appears more than once in the input."""


class InconsistentAggregate(DataError):
    """A column that must be constant within its key (z or psi within a
    period, d within a unit) takes conflicting values."""


class NonFiniteValue(DataError):
    """A numeric field is NaN or infinite."""


# -- numerical errors ----------------------------------------------------------


class DegenerateScale(NumericalError):
    """A variance or singular-value scale that must be positive is zero."""


class CollinearInstrument(NumericalError):
    """The interacted instrument has no within variation."""


class CollinearInstrumentPre(NumericalError):
    """The aggregate instrument lies in the span of the deterministic
    controls over the pre-period."""


class RankDeficientPsi(NumericalError):
    """The deterministic control matrix does not have full column rank."""


class DegenerateSeries(NumericalError):
    """A series is too short or has no variation for the requested fit."""


class SingularKKT(NumericalError):
    """The weight-solver KKT system is singular even after retry."""


class InfeasibleConstraints(NumericalError):
    """The weight constraints admit no solution."""


class MaxIterations(NumericalError):
    """An iterative solver hit its iteration cap before converging."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class DegenerateInstrument(NumericalError):
    """The instrument is perfectly explained by the deterministic controls
    over the post-period, leaving no residual variation."""


class RankTooLarge(NumericalError):
    """A requested factor rank exceeds what the panel dimensions allow."""


class MonteCarloUnstable(NumericalError):
    """Too large a share of simulation replications failed."""
