"""Iterative fitting of the covariate-to-rate quantile path.

The estimator alternates between two ingredients until the coefficient
path stops moving:

  1. a naive start: ordinary quantile regression of log(adjusted count /
     cumulative baseline at censoring) on the covariates, one solve per
     grid knot;
  2. repeat: (a) for each subject, form the posterior density of its rate
     multiplier given its event count, evaluated on the grid of the
     subject's own fitted quantile values; (b) for each knot, re-solve a
     pooled weighted quantile regression whose pseudo-observations are
     (log grid value, subject covariates) weighted by posterior mass.

Within one sweep the pseudo-rows and weights are shared by every knot;
only the quantile level changes, so the solver is warm-started per knot
from the previous sweep's optimal basis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .baseline import BaselineEstimate, estimate_baseline, naive_gamma
from .density import monotone_quantiles, refine_grid, tau_increments
from .errors import GridOutOfRange, QrecurError, RankDeficient, ValidationError, ZeroMass
from .qr import TAU_MAX, TAU_MIN, _solve_scaled
from .records import CoefficientPath, Dataset, TauGrid

_LOG_TINY = float(np.log(np.finfo(float).tiny))


def _default_grid() -> TauGrid:
    return TauGrid.from_range(0.02, 0.98, 0.01)


@dataclass(frozen=True)
class FitConfig:
    """Knobs for the iterative fit.

    tol applies to the squared step sum over knots,
    sum_k ||theta_new[k] - theta_old[k]||^2. gamma_grid_refinement
    subdivides each posterior grid interval for accuracy studies.
    n_starts > 1 adds perturbed restarts of the iteration (seeded by
    rng_seed) and keeps the run with the smallest final step norm.
    """

    grid: TauGrid = field(default_factory=_default_grid)
    max_iter: int = 100
    tol: float = 0.01
    gamma_grid_refinement: int = 1
    adjusted_naive_start: bool = True
    rng_seed: int = 0
    n_starts: int = 1
    quadrature: str = "left"

    def __post_init__(self) -> None:
        if not isinstance(self.grid, TauGrid):
            raise ValidationError("grid must be a TauGrid")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if not self.tol > 0.0:
            raise ValidationError("tol must be positive")
        if self.gamma_grid_refinement < 1:
            raise ValidationError("gamma_grid_refinement must be >= 1")
        if self.n_starts < 1:
            raise ValidationError("n_starts must be >= 1")
        if self.quadrature not in ("left", "trapezoid"):
            raise ValidationError("quadrature must be 'left' or 'trapezoid'")


@dataclass(frozen=True)
class FitResult:
    path: CoefficientPath
    naive_path: CoefficientPath
    iterations: int
    converged: bool
    final_step_norm: float
    baseline: BaselineEstimate
    zero_mass_drops: int
    step_norms: tuple[float, ...]


def _check_grid_range(grid: TauGrid) -> None:
    if grid.knots[0] < TAU_MIN or grid.knots[-1] > TAU_MAX:
        raise GridOutOfRange(
            f"grid spans [{grid.knots[0]}, {grid.knots[-1]}], outside the "
            f"solvable range [{TAU_MIN}, {TAU_MAX}]"
        )


def _solve_grid(responses, design_rows, weights, taus, warm_bases=None):
    """One weighted QR per quantile level on a shared row set.

    Weights fold in by row scaling. Returns (theta (K, p), bases (K, p),
    worst optimality margin). warm_bases rows of -1 mean cold start.

    Weights below 1e-14 of the largest are zeroed: their loss
    contribution sits far under the solver tolerance, and keeping them
    would let near-degenerate rows enter a basis.
    """
    wmax = float(weights.max()) if weights.size else 0.0
    weights = np.where(weights < 1e-14 * wmax, 0.0, weights)
    xs = np.ascontiguousarray(design_rows * weights[:, None])
    ys = np.ascontiguousarray(responses * weights)
    k_taus = len(taus)
    p = design_rows.shape[1]
    theta = np.empty((k_taus, p))
    bases = np.full((k_taus, p), -1, dtype=np.int64)
    worst = np.inf
    row_scale = float(np.max(np.sum(np.abs(xs), axis=1))) if xs.size else 0.0
    for k, tau in enumerate(taus):
        warm = None if warm_bases is None else warm_bases[k]
        b, basis, _, margin = _solve_scaled(xs, ys, tau, warm_basis=warm)
        theta[k] = b
        bases[k] = basis
        worst = min(worst, margin)
    if worst < -1e-8 * (row_scale + 1e-300):
        raise QrecurError(f"weighted QR optimality violated: margin {worst}")
    return theta, bases, worst


def _baseline_and_gamma(data: Dataset, adjusted: bool):
    baseline = estimate_baseline(data)
    ghat = np.array([naive_gamma(rec, baseline, adjusted=adjusted) for rec in data.records])
    if np.any(ghat <= 0.0):
        bad = int(np.flatnonzero(ghat <= 0.0)[0])
        raise ValidationError(
            f"subject {data.records[bad].subject_id!r} has no events; "
            "the unadjusted start needs a positive count for every subject"
        )
    return baseline, ghat


def fit_naive(data: Dataset, grid: TauGrid, adjusted: bool = True) -> CoefficientPath:
    """Plain quantile regression of log naive rate on covariates, per knot."""
    _check_grid_range(grid)
    baseline, ghat = _baseline_and_gamma(data, adjusted)
    return _fit_naive_with(data, grid, ghat)


def _fit_naive_with(data: Dataset, grid: TauGrid, ghat) -> CoefficientPath:
    x = data.design_matrix()
    if np.linalg.matrix_rank(x) < data.p:
        raise RankDeficient(f"design has rank < {data.p}")
    y = np.log(ghat)
    theta, _, _ = _solve_grid(y, x, np.ones(len(y)), grid.array)
    return CoefficientPath(grid, theta)


def _posterior_weights(m, mu_c, pts, log_g, quadrature):
    """Vectorized posterior masses, one row per subject.

    Rows whose normalizer underflows are zeroed and flagged rather than
    raised: the caller drops those subjects for the current sweep.
    Returns (masses (n, J), dropped bool (n,)).
    """
    mean = pts * mu_c[:, None]
    logw = m[:, None] * np.log(mean) - mean - gammaln(m + 1.0)[:, None] + log_g
    logw[~np.isfinite(logw)] = -np.inf
    shift = np.max(logw, axis=1)
    dropped = ~np.isfinite(shift)
    shift_safe = np.where(dropped, 0.0, shift)
    w = np.exp(logw - shift_safe[:, None])
    if quadrature == "left":
        qw = np.concatenate([np.diff(pts, axis=1), np.zeros((pts.shape[0], 1))], axis=1)
    else:
        dq = np.diff(pts, axis=1)
        qw = np.zeros_like(pts)
        qw[:, :-1] += 0.5 * dq
        qw[:, 1:] += 0.5 * dq
    z = np.sum(w * qw, axis=1)
    with np.errstate(divide="ignore"):
        log_z = shift_safe + np.log(z)
    dropped |= (z <= 0.0) | (log_z < _LOG_TINY)
    z_safe = np.where(dropped, 1.0, z)
    masses = (w * qw) / z_safe[:, None]
    masses[dropped] = 0.0
    return masses, dropped


def _iterate(data, config, theta0, baseline, x, m, mu_c):
    """Run the sweep loop from theta0; returns (theta, iters, converged,
    step_norms, zero_mass_drops)."""
    grid = config.grid
    taus = grid.array
    k_knots = len(grid)
    n = data.n
    factor = config.gamma_grid_refinement
    # bin of the cell [p_t, p_{t+1}) to the RIGHT of refined point t: the
    # quadrature weight at t spans that cell, so the density factor must be
    # the right limit there. Using the right-closed bin ending at t would
    # scale the cell by the wrong bin width (ruinously so at jittered ties).
    cell_bins = np.arange((k_knots - 1) * factor) // factor + 1
    dtau = tau_increments(taus)
    log_dtau = np.log(dtau)

    theta = np.asarray(theta0, dtype=float).copy()
    bases = None
    step_norms: list[float] = []
    drops = 0
    converged = False
    iters = 0

    for _ in range(config.max_iter):
        # posterior grid: the subject's own fitted quantile values
        with np.errstate(over="ignore"):
            raw = np.exp(x @ theta.T)
        q = monotone_quantiles(raw)
        pts = refine_grid(q, factor) if factor > 1 else q
        dq = np.diff(q, axis=1, prepend=0.0)
        log_g = np.concatenate(
            [log_dtau[cell_bins][None, :] - np.log(dq[:, cell_bins]),
             np.full((n, 1), -np.inf)],
            axis=1,
        )

        masses, dropped = _posterior_weights(m, mu_c, pts, log_g, config.quadrature)
        drops += int(np.count_nonzero(dropped))
        if np.all(dropped):
            raise ZeroMass("posterior mass underflowed for every subject")

        # pseudo-observations: (log grid value, covariates) with posterior
        # mass times grid increment as weight; last grid point carries none
        resp = np.log(pts[:, :-1]).ravel()
        wts = masses[:, :-1].ravel()
        rows = np.repeat(x, pts.shape[1] - 1, axis=0)

        theta_new, bases, _ = _solve_grid(resp, rows, wts, taus, warm_bases=bases)
        step = float(np.sum((theta_new - theta) ** 2))
        step_norms.append(step)
        theta = theta_new
        iters += 1
        if step < config.tol:
            converged = True
            break

    return theta, iters, converged, step_norms, drops


def fit(data: Dataset, config: FitConfig | None = None) -> FitResult:
    """Full iterative fit; see the module docstring for the loop.

    Non-convergence at max_iter is reported through the converged flag,
    not an error. Subjects whose posterior normalizer underflows are
    dropped for that sweep only and counted in zero_mass_drops.
    """
    if config is None:
        config = FitConfig()
    _check_grid_range(config.grid)
    baseline, ghat = _baseline_and_gamma(data, config.adjusted_naive_start)
    naive_path = _fit_naive_with(data, config.grid, ghat)

    x = data.design_matrix()
    m = data.event_counts().astype(float)
    mu_c = np.array([baseline.mu(rec.censoring_time) for rec in data.records])

    starts = [naive_path.theta]
    if config.n_starts > 1:
        root = np.random.SeedSequence(config.rng_seed, spawn_key=(17,))
        for child in root.spawn(config.n_starts - 1):
            rng = np.random.default_rng(child)
            jitter = rng.normal(scale=0.1, size=naive_path.theta.shape)
            starts.append(naive_path.theta * (1.0 + jitter) + 0.05 * jitter)

    best = None
    for theta0 in starts:
        theta, iters, converged, steps, drops = _iterate(
            data, config, theta0, baseline, x, m, mu_c
        )
        run = (not converged, steps[-1] if steps else np.inf, theta, iters, converged, steps, drops)
        if best is None or run[:2] < best[:2]:
            best = run

    _, _, theta, iters, converged, steps, drops = best
    return FitResult(
        path=CoefficientPath(config.grid, theta),
        naive_path=naive_path,
        iterations=iters,
        converged=converged,
        final_step_norm=steps[-1] if steps else float("inf"),
        baseline=baseline,
        zero_mass_drops=drops,
        step_norms=tuple(steps),
    )
