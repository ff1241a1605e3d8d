"""Core data containers: subject histories, tau-grids, and coefficient paths.

All types here are immutable after construction and safe to share across
worker processes. Numeric payloads are stored as read-only numpy arrays or
tuples of floats.
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's observed recurrent-event history.

    Parameters
    ----------
    subject_id : str
        Opaque identifier; kept verbatim through CSV round trips.
    censoring_time : float
        End of the observation window, C > 0.
    event_times : tuple of float
        Strictly increasing event times, each in (0, C].
    covariates : tuple of float
        Covariate row without the intercept (length p - 1).
    """

    subject_id: str
    censoring_time: float
    event_times: tuple[float, ...] = ()
    covariates: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        c = float(self.censoring_time)
        if not np.isfinite(c) or c <= 0.0:
            raise ValidationError(
                f"subject {self.subject_id!r}: censoring_time must be positive "
                f"and finite, got {self.censoring_time!r}"
            )
        object.__setattr__(self, "censoring_time", c)
        times = tuple(float(t) for t in self.event_times)
        for k, t in enumerate(times):
            if not np.isfinite(t) or t <= 0.0 or t > c:
                raise ValidationError(
                    f"subject {self.subject_id!r}: event time {t!r} outside (0, C={c}]"
                )
            if k > 0 and t <= times[k - 1]:
                raise ValidationError(
                    f"subject {self.subject_id!r}: event times not strictly "
                    f"increasing at position {k} ({times[k - 1]!r} then {t!r})"
                )
        object.__setattr__(self, "event_times", times)
        cov = tuple(float(v) for v in self.covariates)
        if any(not np.isfinite(v) for v in cov):
            raise ValidationError(f"subject {self.subject_id!r}: non-finite covariate")
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "subject_id", str(self.subject_id))

    @property
    def m(self) -> int:
        """Observed event count."""
        return len(self.event_times)


def counting_process_value(record: SubjectRecord, t: float) -> int:
    """Number of events observed up to time t, capped at the censoring time.

    Right-continuous in t: an event at exactly t is counted. For t >= C the
    value equals the total event count m.
    """
    if t < 0:
        raise ValidationError(f"t must be nonnegative, got {t!r}")
    horizon = min(float(t), record.censoring_time)
    return bisect_right(record.event_times, horizon)


@dataclass(frozen=True)
class Dataset:
    """A collection of subjects sharing one covariate layout.

    nu_star is the time horizon used by the baseline identifiability
    constraint; it defaults to the largest censoring time when omitted.
    """

    records: tuple[SubjectRecord, ...]
    covariate_names: tuple[str, ...]
    nu_star: float | None = None

    def __post_init__(self) -> None:
        recs = tuple(self.records)
        if not recs:
            raise ValidationError("dataset must contain at least one subject")
        names = tuple(str(s) for s in self.covariate_names)
        for r in recs:
            if len(r.covariates) != len(names):
                raise ValidationError(
                    f"subject {r.subject_id!r} has {len(r.covariates)} covariates, "
                    f"expected {len(names)}"
                )
        cmax = max(r.censoring_time for r in recs)
        ns = self.nu_star
        if ns is None:
            ns = cmax
        ns = float(ns)
        if not np.isfinite(ns) or ns < cmax:
            raise ValidationError(
                f"nu_star must be finite and >= max censoring time {cmax}, got {ns!r}"
            )
        object.__setattr__(self, "records", recs)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "nu_star", ns)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def p(self) -> int:
        """Design dimension including the intercept."""
        return len(self.covariate_names) + 1

    def design_matrix(self) -> np.ndarray:
        """(n, p) design with a leading column of ones."""
        x = np.ones((self.n, self.p))
        for i, r in enumerate(self.records):
            x[i, 1:] = r.covariates
        return x

    def censoring_times(self) -> np.ndarray:
        return np.array([r.censoring_time for r in self.records])

    def event_counts(self) -> np.ndarray:
        return np.array([r.m for r in self.records], dtype=np.int64)


@dataclass(frozen=True)
class Standardization:
    """Center/scale parameters applied to a subset of covariate columns."""

    columns: tuple[str, ...]
    means: tuple[float, ...]
    scales: tuple[float, ...]


def standardize_dataset(
    data: Dataset, columns: tuple[str, ...] | None = None
) -> tuple[Dataset, Standardization]:
    """Center and scale continuous covariates; returns the transformed dataset
    and the parameters used.

    By default a column is treated as continuous when it takes more than two
    distinct values. Scales use the population standard deviation; a constant
    column keeps scale 1 so the transform stays invertible.
    """
    x = np.array([r.covariates for r in data.records], dtype=float)
    if columns is None:
        cols = tuple(
            name
            for j, name in enumerate(data.covariate_names)
            if np.unique(x[:, j]).size > 2
        )
    else:
        unknown = set(columns) - set(data.covariate_names)
        if unknown:
            raise ValidationError(f"unknown covariate columns: {sorted(unknown)}")
        cols = tuple(columns)
    idx = [data.covariate_names.index(c) for c in cols]
    means, scales = [], []
    for j in idx:
        mu = float(np.mean(x[:, j]))
        sd = float(np.std(x[:, j]))
        if sd == 0.0:
            sd = 1.0
        x[:, j] = (x[:, j] - mu) / sd
        means.append(mu)
        scales.append(sd)
    recs = tuple(
        SubjectRecord(r.subject_id, r.censoring_time, r.event_times, tuple(x[i]))
        for i, r in enumerate(data.records)
    )
    info = Standardization(cols, tuple(means), tuple(scales))
    return Dataset(recs, data.covariate_names, data.nu_star), info


@dataclass(frozen=True)
class TauGrid:
    """Strictly increasing quantile levels in (0, 1).

    The level tau_0 = 0 is implicit and never stored; the corresponding
    quantile value exp{x'beta(0)} is fixed at 0 wherever the density module
    needs it.
    """

    knots: tuple[float, ...]

    def __post_init__(self) -> None:
        ks = tuple(float(t) for t in self.knots)
        if not ks:
            raise ValidationError("tau grid must contain at least one knot")
        prev = 0.0
        for t in ks:
            if not (0.0 < t < 1.0):
                raise ValidationError(f"tau knot {t!r} outside (0, 1)")
            if t <= prev and prev > 0.0:
                raise ValidationError("tau knots must be strictly increasing")
            prev = t
        object.__setattr__(self, "knots", ks)

    @classmethod
    def from_range(cls, lo: float, hi: float, step: float) -> "TauGrid":
        """Equally spaced grid lo, lo+step, ..., hi (inclusive endpoints)."""
        if step <= 0 or hi < lo:
            raise ValidationError(f"bad tau range {lo}:{hi}:{step}")
        count = int(round((hi - lo) / step)) + 1
        if not np.isclose(lo + (count - 1) * step, hi, atol=1e-9):
            raise ValidationError(f"step {step} does not evenly divide [{lo}, {hi}]")
        return cls(tuple(np.linspace(lo, hi, count)))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.knots)

    @property
    def mesh(self) -> float:
        """Max consecutive knot spacing (diagnostic for grid fineness)."""
        ks = self.knots
        if len(ks) == 1:
            return 0.0
        return float(max(b - a for a, b in zip(ks, ks[1:])))

    def __len__(self) -> int:
        return len(self.knots)


@dataclass(frozen=True)
class CoefficientPath:
    """Piecewise-linear coefficient function over a tau grid.

    theta has one row per knot; evaluation interpolates linearly between
    bracketing knots and extends as a constant outside [tau_1, tau_K].
    Evaluation at a knot returns the stored row exactly.
    """

    grid: TauGrid
    theta: np.ndarray

    def __post_init__(self) -> None:
        th = np.asarray(self.theta, dtype=float)
        if th.ndim == 1:
            th = th[:, None]
        if th.shape[0] != len(self.grid):
            raise ValidationError(
                f"theta has {th.shape[0]} rows for {len(self.grid)} knots"
            )
        if not np.all(np.isfinite(th)):
            raise ValidationError("coefficient path contains non-finite values")
        object.__setattr__(self, "theta", _readonly(th.copy()))

    @property
    def p(self) -> int:
        return self.theta.shape[1]

    def evaluate(self, tau) -> np.ndarray:
        """Evaluate the path at scalar or array tau; shape (p,) or (T, p)."""
        taus = np.atleast_1d(np.asarray(tau, dtype=float))
        knots = self.grid.array
        out = np.empty((taus.size, self.p))
        for j in range(self.p):
            out[:, j] = np.interp(taus, knots, self.theta[:, j])
        if np.isscalar(tau) or np.ndim(tau) == 0:
            return out[0]
        return out

    def coefficient(self, j: int) -> np.ndarray:
        """Stored knot values of one coefficient, shape (K,)."""
        return self.theta[:, j]


def evaluate_path(path: CoefficientPath, tau) -> np.ndarray:
    """Piecewise-linear evaluation with constant extension outside the knots."""
    return path.evaluate(tau)
