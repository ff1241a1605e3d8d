"""Exact weighted quantile regression by exchange over basic solutions.

The minimizer of sum_i w_i rho_tau(y_i - x_i'b) is attained at a basic
solution: a coefficient vector interpolating p observations with linearly
independent rows. The solver walks vertices: at each basic solution it
computes one-sided directional derivatives along the 2p edge directions
(each moves a single basic residual off zero), and if some edge descends it
performs a weighted-median line search over the residual breakpoints on
that edge and pivots to the blocking observation. Every pivot strictly
decreases the objective, so the walk terminates without anti-cycling rules.

Weights fold into the data: w rho_tau(v) = rho_tau(w v) for w >= 0, so rows
are pre-scaled by their weights and the kernel solves the unweighted
problem. Zero-weight rows are dropped up front.

Ties among minimizers are resolved toward the lexicographically smallest
basic solution by descending flat edges (zero directional derivative) while
the vertex strictly decreases lexicographically.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import GridOutOfRange, QrecurError, RankDeficient, Unbounded, ValidationError

TAU_MIN = 0.01
TAU_MAX = 0.99


@njit(cache=True)
def _gauss_inv(a):
    """Gauss-Jordan inverse with partial pivoting.

    Rows are equilibrated to unit max-norm first so that bases mixing
    rows of very different scale (tiny weights next to large ones) are
    not misread as singular. Returns (inv, ok, minpiv) where minpiv is
    the smallest pivot met on the equilibrated matrix: a conditioning
    gauge the caller uses to veto nearly singular bases.
    """
    p = a.shape[0]
    m = np.empty((p, 2 * p))
    d = np.empty(p)
    minpiv = np.inf
    for i in range(p):
        s = 0.0
        for j in range(p):
            if abs(a[i, j]) > s:
                s = abs(a[i, j])
        if s <= 0.0:
            return np.zeros((p, p)), False, 0.0
        d[i] = s
        for j in range(p):
            m[i, j] = a[i, j] / s
            m[i, p + j] = 1.0 if i == j else 0.0
    tol = 1e-13
    for col in range(p):
        piv = col
        best = abs(m[col, col])
        for r in range(col + 1, p):
            if abs(m[r, col]) > best:
                best = abs(m[r, col])
                piv = r
        if best <= tol:
            return m[:, p:].copy(), False, 0.0
        if best < minpiv:
            minpiv = best
        if piv != col:
            for j in range(2 * p):
                tmp = m[col, j]
                m[col, j] = m[piv, j]
                m[piv, j] = tmp
        div = m[col, col]
        for j in range(2 * p):
            m[col, j] /= div
        for r in range(p):
            if r != col and m[r, col] != 0.0:
                f = m[r, col]
                for j in range(2 * p):
                    m[r, j] -= f * m[col, j]
    inv = m[:, p:].copy()
    # undo the row scaling: inv(a) = inv(a_scaled) diag(1/d)
    for i in range(p):
        for j in range(p):
            inv[i, j] /= d[j]
    return inv, True, minpiv


@njit(cache=True)
def _initial_basis(x, y):
    """Pick p independent rows near the least-squares fit.

    Rows are ordered by |LS residual| and accepted greedily when they add
    rank (Gram-Schmidt with a relative threshold). Returns (basis, ok).
    """
    n, p = x.shape
    ata = np.zeros((p, p))
    aty = np.zeros(p)
    for i in range(n):
        for j in range(p):
            aty[j] += x[i, j] * y[i]
            for k in range(p):
                ata[j, k] += x[i, j] * x[i, k]
    ridge = 0.0
    for j in range(p):
        ridge += ata[j, j]
    ridge = 1e-12 * (ridge / p + 1e-300)
    for j in range(p):
        ata[j, j] += ridge
    inv, ok, _ = _gauss_inv(ata)
    basis = np.full(p, -1, dtype=np.int64)
    if not ok:
        return basis, False
    bls = inv @ aty
    resid = np.empty(n)
    for i in range(n):
        acc = y[i]
        for j in range(p):
            acc -= x[i, j] * bls[j]
        resid[i] = abs(acc)
    order = np.argsort(resid)
    q = np.zeros((p, p))  # orthonormal rows accepted so far
    got = 0
    for pos in range(n):
        i = order[pos]
        v = x[i].copy()
        nrm0 = 0.0
        for j in range(p):
            nrm0 += v[j] * v[j]
        nrm0 = np.sqrt(nrm0)
        if nrm0 <= 0.0:
            continue
        for r in range(got):
            dot = 0.0
            for j in range(p):
                dot += q[r, j] * v[j]
            for j in range(p):
                v[j] -= dot * q[r, j]
        nrm = 0.0
        for j in range(p):
            nrm += v[j] * v[j]
        nrm = np.sqrt(nrm)
        if nrm > 1e-6 * nrm0:
            for j in range(p):
                q[got, j] = v[j] / nrm
            basis[got] = i
            got += 1
            if got == p:
                return basis, True
    return basis, False


@njit(cache=True)
def _objective(x, y, b, tau):
    n, p = x.shape
    acc = 0.0
    for i in range(n):
        r = y[i]
        for j in range(p):
            r -= x[i, j] * b[j]
        if r < 0.0:
            acc += r * (tau - 1.0)
        else:
            acc += r * tau
    return acc


@njit(cache=True)
def _qr_exchange(x, y, tau, basis_in, have_warm, max_pivots, lex_polish):
    """Vertex walk for min_b sum rho_tau(y - x b).

    Returns (b, basis, pivots, status, margin): status 0 = optimal,
    1 = pivot cap reached, 2 = rank deficient, 3 = unbounded edge (cannot
    occur for tau in (0,1); defensive). margin is the smallest one-sided
    directional derivative at the returned point (>= -dtol when optimal).

    Two numerical guards keep the walk out of degenerate shuffles:
    residuals below round-off (relative to the row's own scale) are
    snapped to exact zeros, so rows sitting on the current vertex resist
    movement instead of spawning breakpoints at t ~ 1e-16; and entering
    rows that would make the basis nearly singular are skipped in favor
    of an earlier breakpoint on the same edge (any earlier stop still
    strictly decreases the objective).
    """
    n, p = x.shape
    basis = basis_in.copy()
    bad = np.zeros(p)

    s = 0.0
    for i in range(n):
        row = 0.0
        for j in range(p):
            row += abs(x[i, j])
        if row > s:
            s = row
    dtol = 1e-10 * (s + 1e-300)
    cond_min = 1e-8

    ok = False
    xb = np.empty((p, p))
    inv_b = np.zeros((p, p))
    if have_warm:
        valid = True
        for k in range(p):
            if basis[k] < 0 or basis[k] >= n:
                valid = False
        if valid:
            for k in range(p):
                for j in range(p):
                    xb[k, j] = x[basis[k], j]
            inv_b, ok, minpiv = _gauss_inv(xb)
            if ok and minpiv < cond_min:
                ok = False
    if not ok:
        basis, found = _initial_basis(x, y)
        if not found:
            return bad, basis, 0, 2, 0.0
        for k in range(p):
            for j in range(p):
                xb[k, j] = x[basis[k], j]
        inv_b, ok, minpiv = _gauss_inv(xb)
        if not ok:
            return bad, basis, 0, 2, 0.0

    yb = np.empty(p)
    for k in range(p):
        yb[k] = y[basis[k]]
    b = inv_b @ yb

    r = np.empty(n)
    g = np.empty((n, p))
    dpos = np.empty(p)
    dneg = np.empty(p)
    tvals = np.empty(n)
    gabs = np.empty(n)
    rows = np.empty(n, dtype=np.int64)
    pivots = 0
    status = 0
    margin = 0.0
    polish_left = 4 * p + 4 if lex_polish else 0

    while True:
        # residuals, snapped to exact zero below per-row round-off scale
        for i in range(n):
            acc = y[i]
            sc = abs(y[i])
            for j in range(p):
                term = x[i, j] * b[j]
                acc -= term
                sc += abs(term)
            if abs(acc) <= 1e-12 * sc:
                acc = 0.0
            r[i] = acc
        for k in range(p):
            r[basis[k]] = 0.0

        # edge directions: moving along +/- column k of inv_b changes row i's
        # residual at rate -/+ g[i, k]
        gm = x @ inv_b
        for i in range(n):
            for j in range(p):
                g[i, j] = gm[i, j]
        for k in range(p):
            for j in range(p):
                g[basis[k], j] = 1.0 if j == k else 0.0

        for k in range(p):
            dpos[k] = 0.0
            dneg[k] = 0.0
        for i in range(n):
            ri = r[i]
            for k in range(p):
                gi = g[i, k]
                if gi == 0.0:
                    continue
                if ri > 0.0:
                    dpos[k] -= gi * tau
                    dneg[k] += gi * tau
                elif ri < 0.0:
                    dpos[k] -= gi * (tau - 1.0)
                    dneg[k] += gi * (tau - 1.0)
                else:
                    # kink at zero resists movement in both directions
                    if gi < 0.0:
                        dpos[k] -= gi * tau
                        dneg[k] += gi * (tau - 1.0)
                    else:
                        dpos[k] -= gi * (tau - 1.0)
                        dneg[k] += gi * tau

        margin = dpos[0]
        for k in range(p):
            if dpos[k] < margin:
                margin = dpos[k]
            if dneg[k] < margin:
                margin = dneg[k]

        if margin >= -dtol:
            if polish_left <= 0:
                break
            # flat edges (|D| <= dtol): move to the adjacent vertex when it
            # is lexicographically smaller at (numerically) equal objective
            obj0 = _objective(x, y, b, tau)
            moved = False
            for kk2 in range(2 * p):
                kk = kk2 // 2
                sign = 1.0 if kk2 % 2 == 0 else -1.0
                dflat = dpos[kk] if sign > 0.0 else dneg[kk]
                if dflat > dtol:
                    continue
                tmin = np.inf
                enter = -1
                for i in range(n):
                    gi = sign * g[i, kk]
                    if gi != 0.0 and r[i] != 0.0:
                        t = r[i] / gi
                        if 0.0 < t < tmin:
                            tmin = t
                            enter = i
                if enter < 0:
                    continue
                cand = b.copy()
                for j in range(p):
                    cand[j] += tmin * sign * inv_b[j, kk]
                smaller = False
                for j in range(p):
                    if cand[j] < b[j]:
                        smaller = True
                        break
                    if cand[j] > b[j]:
                        break
                if not smaller:
                    continue
                if _objective(x, y, cand, tau) > obj0 + 1e-9 * (1.0 + abs(obj0)):
                    continue
                old = basis[kk]
                basis[kk] = enter
                for k in range(p):
                    for j in range(p):
                        xb[k, j] = x[basis[k], j]
                inv_try, ok2, minpiv = _gauss_inv(xb)
                if not ok2 or minpiv < cond_min:
                    basis[kk] = old
                    continue
                inv_b = inv_try
                for k in range(p):
                    yb[k] = y[basis[k]]
                b = inv_b @ yb
                moved = True
                break
            if not moved:
                break
            polish_left -= 1
            continue

        if pivots >= max_pivots:
            status = 1
            break

        bk = 0
        bsign = 1.0
        best = 0.0
        for k in range(p):
            if dpos[k] < best:
                best = dpos[k]
                bk = k
                bsign = 1.0
            if dneg[k] < best:
                best = dneg[k]
                bk = k
                bsign = -1.0

        # line search: breakpoints t_i = r_i / (bsign * g_i) > 0; the
        # one-sided derivative gains |g_i| past each crossing
        cnt = 0
        for i in range(n):
            gi = bsign * g[i, bk]
            if gi != 0.0 and r[i] != 0.0:
                t = r[i] / gi
                if t > 0.0:
                    tvals[cnt] = t
                    gabs[cnt] = abs(gi)
                    rows[cnt] = i
                    cnt += 1
        if cnt == 0:
            status = 3
            break
        order = np.argsort(tvals[:cnt])
        cum = best
        stop = -1
        for pos in range(cnt):
            cum += gabs[order[pos]]
            if cum >= -dtol:
                stop = pos
                break
        if stop < 0:
            status = 3
            break

        # entering row: prefer a well-conditioned basis; walking back to an
        # earlier breakpoint keeps strict descent (every crossed segment on
        # the edge had derivative < -dtol)
        leave = basis[bk]
        enter = -1
        tstar = 0.0
        pos = stop
        tries = 0
        while pos >= 0 and tries < 12:
            o = order[pos]
            basis[bk] = rows[o]
            for k in range(p):
                for j in range(p):
                    xb[k, j] = x[basis[k], j]
            inv_try, ok2, minpiv = _gauss_inv(xb)
            if ok2 and minpiv >= cond_min:
                inv_b = inv_try
                enter = rows[o]
                tstar = tvals[o]
                break
            pos -= 1
            tries += 1
        if enter < 0:
            # no well-conditioned candidate: fall back to the stopping row
            o = order[stop]
            basis[bk] = rows[o]
            for k in range(p):
                for j in range(p):
                    xb[k, j] = x[basis[k], j]
            inv_try, ok2, minpiv = _gauss_inv(xb)
            if not ok2:
                basis[bk] = leave
                status = 2
                break
            inv_b = inv_try
            enter = rows[o]
            tstar = tvals[o]

        for k in range(p):
            yb[k] = y[basis[k]]
        b = inv_b @ yb
        pivots += 1

    return b, basis, pivots, status, margin


@dataclass(frozen=True)
class WeightedQRProblem:
    """One weighted quantile regression instance."""

    responses: np.ndarray
    design: np.ndarray
    weights: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        y = np.ascontiguousarray(self.responses, dtype=float)
        x = np.ascontiguousarray(self.design, dtype=float)
        w = np.ascontiguousarray(self.weights, dtype=float)
        if x.ndim != 2 or y.ndim != 1 or w.ndim != 1:
            raise ValidationError("design must be 2-D; responses and weights 1-D")
        if not (x.shape[0] == y.size == w.size):
            raise ValidationError(
                f"inconsistent sizes: {x.shape[0]} rows, {y.size} responses, "
                f"{w.size} weights"
            )
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
            raise ValidationError("non-finite entries in QR problem")
        if np.any(w < 0.0) or not np.any(w > 0.0):
            raise ValidationError("weights must be nonnegative with positive sum")
        if not (TAU_MIN <= self.tau <= TAU_MAX):
            raise GridOutOfRange(
                f"tau={self.tau} outside the supported range [{TAU_MIN}, {TAU_MAX}]"
            )
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "design", x)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "tau", float(self.tau))


def _solve_scaled(xs, ys, tau, warm_basis=None, max_pivots=None, lex_polish=True):
    """Run the kernel on weight-scaled rows; map status codes to errors."""
    n, p = xs.shape
    if max_pivots is None:
        max_pivots = n + 10 * p + 100
    if warm_basis is None:
        warm_basis = np.full(p, -1, dtype=np.int64)
        have_warm = False
    else:
        warm_basis = np.asarray(warm_basis, dtype=np.int64)
        have_warm = bool(np.all(warm_basis >= 0))
    b, basis, pivots, status, margin = _qr_exchange(
        np.ascontiguousarray(xs),
        np.ascontiguousarray(ys),
        float(tau),
        warm_basis,
        have_warm,
        int(max_pivots),
        lex_polish,
    )
    if status == 2:
        raise RankDeficient("design is rank deficient on positive-weight rows")
    if status == 3:
        raise Unbounded("descent edge without blocking breakpoint")
    if status == 1:
        raise QrecurError(f"QR exchange did not finish within {max_pivots} pivots")
    return b, basis, pivots, margin


def solve_weighted_qr(problem: WeightedQRProblem) -> np.ndarray:
    """Exact minimizer of the weighted check loss.

    The returned b satisfies the subgradient optimality condition: every
    one-sided directional derivative of the objective at b is nonnegative
    (up to a tolerance of one active observation's weight times its row
    scale). Among exact ties the lexicographically smallest basic solution
    is preferred.
    """
    keep = problem.weights > 0.0
    x = problem.design[keep]
    y = problem.responses[keep]
    w = problem.weights[keep]
    p = x.shape[1]
    if x.shape[0] < p or np.linalg.matrix_rank(x) < p:
        raise RankDeficient(
            f"design has rank < {p} on the {x.shape[0]} positive-weight rows"
        )
    b, _, _, _ = _solve_scaled(x * w[:, None], y * w, problem.tau)
    return b


def check_loss(v, tau: float):
    """rho_tau(v) = v (tau - I(v < 0)), elementwise."""
    v = np.asarray(v, dtype=float)
    return v * (tau - (v < 0.0))
