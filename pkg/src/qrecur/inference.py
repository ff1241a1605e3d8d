"""Bootstrap uncertainty and the quantile-constancy test.

Resampling is by whole subject: a sampled subject brings its entire event
history, the unit of independence in the model. Each replicate re-runs the
full pipeline (baseline included), so the reported spread reflects every
estimated ingredient, and a per-replicate RNG stream derived from
(seed, replicate index) makes results reproducible regardless of how the
replicates are scheduled.

The constancy test integrates one coefficient of the fitted path against
the indicator weight I{tau <= (tau_L + tau_U)/2} after subtracting the
interval-average effect; a constant coefficient integrates to exactly
zero. The null distribution is approximated by the bootstrap analogue of
the statistic centered at the full-data fit, and the rejection region is
the raw (asymmetric) pair of empirical quantiles of those draws.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from math import ceil, sqrt

import numpy as np
from scipy.stats import norm

from .errors import QrecurError, RangeError, TooManyFailures, ValidationError
from .estimator import FitConfig, FitResult, fit
from .records import CoefficientPath, Dataset, _readonly


@dataclass(frozen=True)
class BootstrapSummary:
    """Replicate spread around a fitted coefficient path.

    se is (K, p); ci_normal and ci_percentile are (K, p, 2) with the lower
    endpoint first. Failed replicates are excluded from every statistic and
    counted in n_failed; replicate_paths holds only the successful ones.
    """

    base_path: CoefficientPath
    replicate_paths: tuple[CoefficientPath, ...]
    se: np.ndarray
    ci_normal: np.ndarray
    ci_percentile: np.ndarray
    B: int
    alpha: float
    seed: int
    n_failed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "se", _readonly(np.asarray(self.se, dtype=float)))
        object.__setattr__(self, "ci_normal", _readonly(np.asarray(self.ci_normal, dtype=float)))
        object.__setattr__(
            self, "ci_percentile", _readonly(np.asarray(self.ci_percentile, dtype=float))
        )


@dataclass(frozen=True)
class ConstancyTestResult:
    """Outcome of the bootstrap test of a constant-in-tau coefficient.

    rejection_region is the (alpha/2, 1-alpha/2) pair of raw empirical
    quantiles of the bootstrap statistics t_star; reject holds exactly when
    statistic falls outside it.
    """

    coefficient_index: int
    statistic: float
    rejection_region: tuple[float, float]
    reject: bool
    eta_hat: float
    t_star: tuple[float, ...]
    tau_bounds: tuple[float, float]
    alpha: float
    B: int
    seed: int


def _resample(data: Dataset, rng: np.random.Generator) -> Dataset:
    idx = rng.integers(0, data.n, size=data.n)
    return Dataset(
        records=tuple(data.records[int(i)] for i in idx),
        covariate_names=data.covariate_names,
        nu_star=data.nu_star,
    )


def _replicate_theta(args):
    """One bootstrap refit; module-level so process pools can pickle it."""
    data, config, seed, b = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
    try:
        return b, fit(_resample(data, rng), config).path.theta, None
    except QrecurError as exc:
        return b, None, f"{type(exc).__name__}: {exc}"


def _order_stat_bounds(samples: np.ndarray, alpha: float):
    """Raw empirical quantile pair at levels alpha/2 and 1 - alpha/2.

    Order statistics with 1-based rank ceil(level * B), no interpolation:
    a two-replicate bootstrap returns the two values themselves. Sorts
    along axis 0 so stacked (B, ...) arrays vectorize.
    """
    s = np.sort(np.asarray(samples, dtype=float), axis=0)
    nb = s.shape[0]
    k_lo = max(int(ceil(0.5 * alpha * nb)), 1)
    k_hi = int(ceil((1.0 - 0.5 * alpha) * nb))
    return s[k_lo - 1], s[k_hi - 1]


def bootstrap(
    data: Dataset,
    config: FitConfig,
    B: int,
    alpha: float = 0.05,
    seed: int = 0,
    fit_result: FitResult | None = None,
    jobs: int = 1,
) -> BootstrapSummary:
    """Whole-subject resampling bootstrap of the iterative fit.

    Per (knot, coefficient): SE is the replicate standard deviation,
    the normal CI is estimate +- z_{1-alpha/2} * SE, and the percentile
    CI endpoints are raw order statistics of the replicates. Pass a
    precomputed fit_result to skip refitting the original data.
    """
    if B < 2:
        raise ValidationError("B must be >= 2")
    if not 0.0 < alpha < 1.0:
        raise ValidationError("alpha must be in (0, 1)")
    if jobs < 1:
        raise ValidationError("jobs must be >= 1")
    base = fit(data, config) if fit_result is None else fit_result

    args = [(data, config, seed, b) for b in range(B)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replicate_theta, args))
    else:
        results = [_replicate_theta(a) for a in args]

    thetas = [theta for _, theta, _ in results if theta is not None]
    n_failed = B - len(thetas)
    if n_failed > 0.2 * B:
        first = next(err for _, theta, err in results if theta is None)
        raise TooManyFailures(
            f"{n_failed} of {B} bootstrap replicates failed to fit (first: {first})"
        )

    stack = np.stack(thetas)  # (B_eff, K, p)
    se = np.std(stack, axis=0, ddof=1)
    z = float(norm.ppf(1.0 - 0.5 * alpha))
    est = base.path.theta
    ci_normal = np.stack([est - z * se, est + z * se], axis=-1)
    lo, hi = _order_stat_bounds(stack, alpha)
    ci_percentile = np.stack([lo, hi], axis=-1)
    grid = base.path.grid
    return BootstrapSummary(
        base_path=base.path,
        replicate_paths=tuple(CoefficientPath(grid, th) for th in thetas),
        se=se,
        ci_normal=ci_normal,
        ci_percentile=ci_percentile,
        B=B,
        alpha=alpha,
        seed=seed,
        n_failed=n_failed,
    )


def _pl_integral(knots: np.ndarray, vals: np.ndarray, lo: float, hi: float) -> float:
    """Exact integral of the piecewise-linear interpolant over [lo, hi].

    Breakpoints are only at knots, so the trapezoid sum over the merged
    breakpoint sequence is the closed form, not an approximation.
    """
    inner = knots[(knots > lo) & (knots < hi)]
    xs = np.concatenate([[lo], inner, [hi]])
    ys = np.interp(xs, knots, vals)
    return float(np.trapezoid(ys, xs))


def _check_bounds(knots: np.ndarray, tau_l: float, tau_u: float) -> None:
    if not tau_l < tau_u or tau_l < knots[0] or tau_u > knots[-1]:
        raise RangeError(
            f"bounds [{tau_l}, {tau_u}] must sit inside the fitted grid "
            f"[{knots[0]}, {knots[-1]}]"
        )


def _avg_column(knots: np.ndarray, vals: np.ndarray, tau_l: float, tau_u: float) -> float:
    # the average of a constant is that constant; returning it directly
    # keeps constant paths exactly centered (no trapezoid round-off)
    if np.all(vals == vals[0]):
        return float(vals[0])
    return _pl_integral(knots, vals, tau_l, tau_u) / (tau_u - tau_l)


def average_effect(path: CoefficientPath, j: int, tau_L: float = 0.1, tau_U: float = 0.9) -> float:
    """Average of coefficient j over [tau_L, tau_U], exact on the path."""
    if not 0 <= j < path.p:
        raise ValidationError(f"coefficient index {j} outside 0..{path.p - 1}")
    knots = path.grid.array
    _check_bounds(knots, tau_L, tau_U)
    return _avg_column(knots, path.theta[:, j], tau_L, tau_U)


def _t_statistic(knots, vals, tau_l, tau_u, n_subjects, eta) -> float:
    """sqrt(n) integral of (vals - eta) against I{tau <= midpoint}."""
    mid = 0.5 * (tau_l + tau_u)
    return sqrt(n_subjects) * _pl_integral(knots, vals - eta, tau_l, mid)


def constancy_test(
    data: Dataset,
    config: FitConfig,
    j: int,
    tau_L: float = 0.1,
    tau_U: float = 0.9,
    B: int = 100,
    alpha: float = 0.05,
    seed: int = 0,
    jobs: int = 1,
    summary: BootstrapSummary | None = None,
) -> ConstancyTestResult:
    """Bootstrap test of H0: coefficient j is constant over [tau_L, tau_U].

    The replicate statistics apply the same centered functional to the
    difference path (replicate minus full-data fit), whose interval average
    equals the difference of the averages by linearity. Pass a precomputed
    summary to reuse its replicates; B, alpha, and seed are then taken from
    it.
    """
    if summary is None:
        summary = bootstrap(data, config, B, alpha=alpha, seed=seed, jobs=jobs)
    path = summary.base_path
    if not 0 <= j < path.p:
        raise ValidationError(f"coefficient index {j} outside 0..{path.p - 1}")
    knots = path.grid.array
    _check_bounds(knots, tau_L, tau_U)

    vals = path.theta[:, j]
    eta = _avg_column(knots, vals, tau_L, tau_U)
    t_obs = _t_statistic(knots, vals, tau_L, tau_U, data.n, eta)

    t_star = np.empty(len(summary.replicate_paths))
    for i, rep in enumerate(summary.replicate_paths):
        diff = rep.theta[:, j] - vals
        eta_diff = _avg_column(knots, diff, tau_L, tau_U)
        t_star[i] = _t_statistic(knots, diff, tau_L, tau_U, data.n, eta_diff)

    q_lo, q_hi = _order_stat_bounds(t_star, summary.alpha)
    return ConstancyTestResult(
        coefficient_index=j,
        statistic=t_obs,
        rejection_region=(float(q_lo), float(q_hi)),
        reject=bool(t_obs < q_lo or t_obs > q_hi),
        eta_hat=eta,
        t_star=tuple(float(t) for t in t_star),
        tau_bounds=(tau_L, tau_U),
        alpha=summary.alpha,
        B=summary.B,
        seed=summary.seed,
    )
