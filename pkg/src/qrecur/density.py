"""Window pmf, piecewise conditional density, and posterior weights.

Three ingredients combine here: the Poisson window pmf rho(m | gamma, C)
with mean gamma * mu(C); the piecewise-constant density g implied by a
quantile path (mass tau_k - tau_{k-1} spread uniformly over the quantile
bin (q_{k-1}, q_k], with q_0 = 0 fixed); and the normalized posterior
f(gamma | m, C, x) proportional to rho * g over a per-subject gamma grid.

All products are computed in log space and exponentiated after subtracting
the per-subject maximum: event counts in the hundreds overflow gamma^m long
before the posterior itself degenerates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import DegenerateBin, ValidationError, ZeroMass
from .records import CoefficientPath, SubjectRecord, _readonly

_LOG_TINY = float(np.log(np.finfo(float).tiny))


@dataclass(frozen=True)
class GammaGrid:
    """Strictly increasing positive grid of candidate risk values."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValidationError("gamma grid needs at least two points")
        if not np.all(np.isfinite(pts)) or pts[0] <= 0.0:
            raise ValidationError("gamma grid points must be positive and finite")
        if np.any(np.diff(pts) <= 0.0):
            raise ValidationError("gamma grid points must be strictly increasing")
        object.__setattr__(self, "points", _readonly(pts))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class PosteriorDensity:
    """Posterior density values over a gamma grid.

    values[j] = rho(m | point_j, C) * g(point_j+) / normalizer, with
    g(point_j+) the right limit of the piecewise density at the point.
    masses are the per-point quadrature weights values * dgamma; they sum
    to 1 exactly under the quadrature rule that produced the normalizer.
    """

    grid: GammaGrid
    values: np.ndarray
    masses: np.ndarray
    normalizer: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _readonly(self.values))
        object.__setattr__(self, "masses", _readonly(self.masses))

    def riemann_mass(self) -> float:
        """Left-Riemann integral of the stored values over the grid."""
        pts = self.grid.points
        return float(np.sum(self.values[:-1] * np.diff(pts)))


def poisson_window_log_pmf(m, gamma, mu_c):
    """log rho(m | gamma, C): Poisson log-pmf at m with mean gamma * mu_c.

    Broadcasts over numpy arguments.
    """
    m = np.asarray(m, dtype=float)
    mean = np.asarray(gamma, dtype=float) * np.asarray(mu_c, dtype=float)
    if np.any(mean <= 0.0):
        raise ValidationError("gamma and mu_c must be positive")
    return m * np.log(mean) - mean - gammaln(m + 1.0)


def poisson_window_pmf(m, gamma, mu_c):
    """Probability of observing m events in a window with cumulative
    intensity mu_c for a subject of risk gamma."""
    out = np.exp(poisson_window_log_pmf(m, gamma, mu_c))
    return float(out) if out.ndim == 0 else out


def tau_increments(knots) -> np.ndarray:
    """(tau_1 - 0, tau_2 - tau_1, ..., tau_K - tau_{K-1})."""
    ks = np.asarray(knots, dtype=float)
    return np.diff(np.concatenate([[0.0], ks]))


def monotone_quantiles(raw, eps_scale: float = 1e-8) -> np.ndarray:
    """Monotone rearrangement with tie jitter along the last axis.

    Sorts ascending, then forces strict increase by lifting each entry to at
    least its predecessor plus eps = eps_scale * (1 + |q_max|). Raises
    DegenerateBin if adjacent values still coincide afterwards.
    """
    q = np.sort(np.asarray(raw, dtype=float), axis=-1)
    if not np.all(np.isfinite(q)):
        raise ValidationError("quantile values overflow or are non-finite")
    eps = eps_scale * (1.0 + np.abs(q[..., -1:]))
    for k in range(1, q.shape[-1]):
        q[..., k] = np.maximum(q[..., k], q[..., k - 1] + eps[..., 0])
    if np.any(np.diff(q, axis=-1) <= 0.0):
        raise DegenerateBin("adjacent quantile values coincide after jitter")
    return q


def subject_quantiles(x, path: CoefficientPath) -> np.ndarray:
    """Strictly increasing per-subject quantile values exp{x'beta(tau_k)}."""
    x = np.asarray(x, dtype=float)
    with np.errstate(over="raise"):
        try:
            raw = np.exp(path.theta @ x)
        except FloatingPointError:
            raise ValidationError("quantile values overflow: path * x too large")
    return monotone_quantiles(raw)


def piecewise_density(gamma, x, path: CoefficientPath):
    """Density of the piecewise-uniform quantile construction at gamma.

    Bin k carries mass tau_k - tau_{k-1} uniformly over (q_{k-1}, q_k] with
    q_0 = 0; gamma beyond the last quantile value has density 0. Integrates
    to tau_K over (0, q_K]; the mass above the last knot is unrepresented.
    """
    q = subject_quantiles(x, path)
    dtau = tau_increments(path.grid.knots)
    dq = np.diff(np.concatenate([[0.0], q]))
    g = np.atleast_1d(np.asarray(gamma, dtype=float))
    if np.any(g <= 0.0):
        raise ValidationError("gamma must be positive")
    idx = np.searchsorted(q, g, side="left")
    inside = idx < len(q)
    out = np.zeros_like(g)
    out[inside] = dtau[idx[inside]] / dq[idx[inside]]
    if np.ndim(gamma) == 0:
        return float(out[0])
    return out


def _piecewise_density_right(gamma, x, path: CoefficientPath) -> np.ndarray:
    """Right limit of piecewise_density: the value on [gamma, next knot).

    Quadrature cells [p_j, p_{j+1}) are half-open on the right, so the
    weight attached to p_j must carry the density of the cell it spans.
    Evaluating the right-closed bin that *ends* at p_j instead would scale
    the cell by the wrong bin width (catastrophically so when the bin
    below is a tie-jitter sliver). Differs from piecewise_density only
    where gamma sits exactly on a quantile knot; at the last knot the
    right limit is 0.
    """
    q = subject_quantiles(x, path)
    dtau = tau_increments(path.grid.knots)
    dq = np.diff(np.concatenate([[0.0], q]))
    g = np.atleast_1d(np.asarray(gamma, dtype=float))
    if np.any(g <= 0.0):
        raise ValidationError("gamma must be positive")
    idx = np.searchsorted(q, g, side="right")
    inside = idx < len(q)
    out = np.zeros_like(g)
    out[inside] = dtau[idx[inside]] / dq[idx[inside]]
    return out


def refine_grid(points: np.ndarray, factor: int) -> np.ndarray:
    """Split every interval into `factor` equal parts (midpoint insertion for
    factor 2). Works on the last axis."""
    if factor < 1:
        raise ValidationError("refinement factor must be >= 1")
    pts = np.asarray(points, dtype=float)
    if factor == 1:
        return pts.copy()
    steps = np.arange(factor) / factor
    left = pts[..., :-1, None]
    right = pts[..., 1:, None]
    mids = left + (right - left) * steps  # (..., K-1, factor)
    flat = mids.reshape(*pts.shape[:-1], -1)
    return np.concatenate([flat, pts[..., -1:]], axis=-1)


def default_gamma_grid(x, path: CoefficientPath, refinement: int = 1) -> GammaGrid:
    """Per-subject grid at the current quantile values, optionally refined by
    inserting equally spaced interior points for quadrature accuracy."""
    q = subject_quantiles(x, path)
    if len(q) < 2:
        raise ValidationError("default grid needs at least two tau knots")
    return GammaGrid(refine_grid(q, refinement))


def _quadrature_masses(points: np.ndarray, quadrature: str) -> np.ndarray:
    """Per-point integration weights along the last axis."""
    d = np.diff(points, axis=-1)
    zeros = np.zeros_like(points[..., :1])
    if quadrature == "left":
        return np.concatenate([d, zeros], axis=-1)
    if quadrature == "trapezoid":
        return np.concatenate([d / 2, zeros], axis=-1) + np.concatenate(
            [zeros, d / 2], axis=-1
        )
    raise ValidationError(f"unknown quadrature {quadrature!r}")


def posterior_from_parts(
    m: int,
    mu_c: float,
    points: np.ndarray,
    log_g: np.ndarray,
    quadrature: str = "left",
) -> PosteriorDensity:
    """Normalize rho * g over a grid given precomputed log g values."""
    logw = poisson_window_log_pmf(m, points, mu_c) + log_g
    shift = float(np.max(logw))
    if not np.isfinite(shift):
        raise ZeroMass("no gamma grid point carries positive density")
    w = np.exp(logw - shift)
    qw = _quadrature_masses(points, quadrature)
    z_shifted = float(np.sum(w * qw))
    if z_shifted <= 0.0 or shift + np.log(z_shifted) < _LOG_TINY:
        raise ZeroMass(
            f"posterior normalizer underflows (m={m}, grid "
            f"[{points[0]:.3g}, {points[-1]:.3g}])"
        )
    values = w / z_shifted
    return PosteriorDensity(
        GammaGrid(points), values, values * qw, float(np.exp(shift + np.log(z_shifted)))
    )


def posterior_density(
    record: SubjectRecord,
    x,
    path: CoefficientPath,
    baseline,
    grid: GammaGrid | None = None,
    quadrature: str = "left",
    refinement: int = 1,
) -> PosteriorDensity:
    """Posterior density of a subject's risk given its event count.

    The grid defaults to the subject's own quantile values under the current
    path (refined when requested). The g factor at each grid point is its
    right limit, the density on the cell [p_j, p_{j+1}) that the point's
    quadrature weight spans; rho * g is then normalized by the quadrature
    sum, so the returned masses sum to 1. Mass below the first and above
    the last grid point is truncated by construction.
    """
    if grid is None:
        grid = default_gamma_grid(x, path, refinement)
    pts = grid.points
    with np.errstate(divide="ignore"):
        log_g = np.log(_piecewise_density_right(pts, x, path))
    mu_c = baseline.mu(record.censoring_time)
    return posterior_from_parts(record.m, float(mu_c), pts, log_g, quadrature)
