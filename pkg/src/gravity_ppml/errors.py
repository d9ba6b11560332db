"""Exception taxonomy shared by all modules."""


class GravityPpmlError(Exception):
    """Base class for all errors raised by this package."""


class DuplicateCell(GravityPpmlError):
    """The same (exporter, importer, period) cell appears more than once."""


class NegativeOutcome(GravityPpmlError):
    """An outcome value is negative."""


class BadValue(GravityPpmlError):
    """A non-finite or otherwise invalid numeric value was supplied."""


class EmptySample(GravityPpmlError):
    """No usable observations remain after pruning."""


class DegeneratePair(GravityPpmlError):
    """A pair with zero total outcome has no finite pair effect."""


class NotConverged(GravityPpmlError):
    """The optimizer stopped before meeting its convergence criteria.

    The best iterate reached is attached as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class CollinearRegressors(GravityPpmlError):
    """Regressors are collinear after fixed-effect absorption."""


class GammaZeroOutcome(GravityPpmlError):
    """A negative-power variance family requires strictly positive outcomes."""


class SingularW(GravityPpmlError):
    """The structural-parameter information matrix is singular."""


class BadFit(GravityPpmlError):
    """A fit object is unusable (nonpositive fitted means, broken invariants)."""


class ProjectionNotConverged(GravityPpmlError):
    """The weighted within-transformation failed to reach its tolerance."""


class RankDeficientFeBlock(GravityPpmlError):
    """A per-country curvature block has lower rank than its structure allows.

    Carries ``role`` ("exporter" or "importer") and ``label``.
    """

    def __init__(self, message, role=None, label=None):
        super().__init__(message)
        self.role = role
        self.label = label


class PartitionDegenerate(GravityPpmlError):
    """A country split produced an unusable subpanel."""


class JackknifeFailed(GravityPpmlError):
    """Repeated subpanel failures exhausted the partition retry budget.

    Carries ``diagnostics``, a list of the failure events encountered.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class OverflowInDgp(BadValue):
    """A simulated mean or disturbance overflowed; carries the cell."""

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class TooManyFailures(GravityPpmlError):
    """More than the tolerated share of Monte Carlo replications failed."""
