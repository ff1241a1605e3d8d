"""Exception taxonomy shared across the package.

Every error raised by the library derives from :class:`QrecurError`, so the
CLI can catch one type and map it to a nonzero exit status.
"""
from __future__ import annotations


class QrecurError(Exception):
    """Base class for all library errors."""


class ValidationError(QrecurError):
    """Input data violates a documented invariant (bad times, shapes, values)."""


class SchemaError(QrecurError):
    """A file or config document does not match the expected schema."""


class NoEvents(QrecurError):
    """The dataset contains zero recurrent events; the baseline is undefined."""


class EmptyRisk(QrecurError):
    """A baseline jump has zero denominator. Cannot occur with the cadlag
    denominator convention; raised defensively."""


class DegenerateBin(QrecurError):
    """Two adjacent quantile levels still coincide after monotonization."""


class ZeroMass(QrecurError):
    """A subject's posterior normalizer underflows: no grid point carries
    non-negligible likelihood. Signals a grid/path mismatch."""


class RankDeficient(QrecurError):
    """Design matrix is not full column rank on the rows with positive weight."""


class Unbounded(QrecurError):
    """The weighted check-loss objective is unbounded below. Cannot occur for
    quantile levels in (0, 1) with nonnegative weights; raised defensively."""


class GridOutOfRange(QrecurError):
    """Requested quantile level outside the supported range [0.01, 0.99]."""


class RangeError(QrecurError):
    """Requested integration bounds exit the fitted grid."""


class TooManyFailures(QrecurError):
    """Too large a fraction of bootstrap replicates or Monte Carlo
    replications failed to fit."""
