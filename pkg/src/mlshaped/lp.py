"""Bounded-variable primal simplex with row and upper-bound duals.

The kernel works on a dense copy of the constraint matrix and keeps an
explicit basis inverse that is updated in product form after every pivot
and rebuilt from scratch every ``REFACTOR_EVERY`` iterations.  Problems at
the scale handled here (tens to a few hundred rows) fit comfortably.

Sign conventions (minimisation):

* ``row_duals[i]`` is the marginal ``d obj / d rhs[i]``; it is >= 0 for
  ``>=`` rows and <= 0 for ``<=`` rows.
* ``upper_bound_duals[j]`` is the nonnegative multiplier of ``x_j <= ub_j``,
  i.e. ``max(-reduced_cost_j, 0)`` for a nonbasic variable.

With these conventions a subproblem ``min q y : W y >= r, 0 <= y <= 1`` has
the dual objective ``phi @ r - psi.sum()``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .model import GE, LE, EQ, MixedModel, Scenario

OPTIMAL = 0
INFEASIBLE = 1
UNBOUNDED = 2
FAILED = 3

STATUS_NAMES = {OPTIMAL: "optimal", INFEASIBLE: "infeasible",
                UNBOUNDED: "unbounded", FAILED: "failed"}

FEAS_TOL = 1e-7
OPT_TOL = 1e-7
PIV_TOL = 1e-9
REFACTOR_EVERY = 50

_AT_LOWER = 0
_AT_UPPER = 1
_BASIC = 2


class RecourseError(RuntimeError):
    """A second-stage problem is infeasible at some first-stage point."""


@dataclass
class LPSolution:
    status: str
    primal: np.ndarray
    objective: float
    row_duals: np.ndarray
    upper_bound_duals: np.ndarray
    reduced_costs: np.ndarray
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


@njit(cache=True)
def _refactor(A, b, ub, basis, state, xB, Binv):
    m = A.shape[0]
    B = np.empty((m, m))
    for i in range(m):
        B[:, i] = A[:, basis[i]]
    inv = np.linalg.inv(B)
    Binv[:, :] = inv
    rhs = b.copy()
    for j in range(A.shape[1]):
        if state[j] == _AT_UPPER:
            rhs -= A[:, j] * ub[j]
    xB[:] = Binv @ rhs


@njit(cache=True)
def _iterate(A, b, cost, ub, basis, state, xB, Binv, max_iter, bland_after):
    m, N = A.shape
    AT = np.ascontiguousarray(A.T)
    degenerate = 0
    bland = False
    since = 0
    for it in range(max_iter):
        if since >= REFACTOR_EVERY:
            _refactor(A, b, ub, basis, state, xB, Binv)
            since = 0
        cB = np.empty(m)
        for i in range(m):
            cB[i] = cost[basis[i]]
        y = cB @ Binv
        d = cost - y @ A

        q = -1
        best = 0.0
        for j in range(N):
            s = state[j]
            if s == _BASIC or ub[j] <= 0.0:
                continue
            dj = d[j]
            if s == _AT_LOWER and dj < -OPT_TOL:
                score = -dj
            elif s == _AT_UPPER and dj > OPT_TOL:
                score = dj
            else:
                continue
            if bland:
                q = j
                break
            if score > best:
                best = score
                q = j
        if q < 0:
            return OPTIMAL, it

        direction = 1.0 if state[q] == _AT_LOWER else -1.0
        alpha = Binv @ AT[q]

        t = ub[q]
        r = -1
        to_upper = False
        for i in range(m):
            delta = direction * alpha[i]
            if delta > PIV_TOL:
                lim = xB[i] / delta
                up = False
            elif delta < -PIV_TOL:
                ubi = ub[basis[i]]
                if ubi == np.inf:
                    continue
                lim = (ubi - xB[i]) / (-delta)
                up = True
            else:
                continue
            if lim < 0.0:
                lim = 0.0
            take = False
            if lim < t - 1e-12:
                take = True
            elif lim <= t + 1e-12 and r >= 0:
                if bland:
                    take = basis[i] < basis[r]
                else:
                    take = abs(alpha[i]) > abs(alpha[r])
            if take:
                t = lim
                r = i
                to_upper = up

        if t == np.inf:
            return UNBOUNDED, it

        step = t * direction
        for i in range(m):
            xB[i] -= step * alpha[i]

        if r < 0:
            state[q] = _AT_UPPER if state[q] == _AT_LOWER else _AT_LOWER
        else:
            piv = alpha[r]
            if abs(piv) < PIV_TOL:
                return FAILED, it
            leaving = basis[r]
            start = 0.0 if state[q] == _AT_LOWER else ub[q]
            xB[r] = start + step
            basis[r] = q
            state[q] = _BASIC
            state[leaving] = _AT_UPPER if to_upper else _AT_LOWER
            Binv[r, :] /= piv
            for i in range(m):
                if i != r and alpha[i] != 0.0:
                    Binv[i, :] -= alpha[i] * Binv[r, :]
            since += 1

        if t <= 1e-12:
            degenerate += 1
            if degenerate > bland_after:
                bland = True
        else:
            degenerate = 0
    return FAILED, max_iter


@njit(cache=True)
def _solve_dense(c, A, sense, b, lb, ub, max_iter):
    """Solve ``min c x : A x (sense) b, lb <= x <= ub`` with finite ``lb``.

    Returns (status, x, obj, row_duals, reduced_costs, iterations).
    """
    m, n = A.shape
    shifted = b - A @ lb
    width = ub - lb
    flip = np.ones(m)
    rsense = sense.copy()
    for i in range(m):
        if shifted[i] < 0.0 or (sense[i] == GE and shifted[i] == 0.0):
            flip[i] = -1.0
            if sense[i] == LE:
                rsense[i] = GE
            elif sense[i] == GE:
                rsense[i] = LE
    n_slack = 0
    n_art = 0
    for i in range(m):
        if rsense[i] != EQ:
            n_slack += 1
        if rsense[i] != LE:
            n_art += 1
    N = n + n_slack + n_art
    Af = np.zeros((m, N))
    bf = shifted * flip
    ubf = np.full(N, np.inf)
    ubf[:n] = width
    basis = np.empty(m, dtype=np.int64)
    state = np.zeros(N, dtype=np.int64)
    ks = n
    ka = n + n_slack
    for i in range(m):
        Af[i, :n] = A[i] * flip[i]
        if rsense[i] == LE:
            Af[i, ks] = 1.0
            basis[i] = ks
            ks += 1
        else:
            if rsense[i] == GE:
                Af[i, ks] = -1.0
                ks += 1
            Af[i, ka] = 1.0
            basis[i] = ka
            ka += 1
    for i in range(m):
        state[basis[i]] = _BASIC
    Binv = np.eye(m)
    xB = bf.copy()
    bland_after = 3 * (m + n)
    total = 0

    if n_art > 0:
        cost1 = np.zeros(N)
        cost1[n + n_slack:] = 1.0
        status, its = _iterate(Af, bf, cost1, ubf, basis, state, xB, Binv,
                               max_iter, bland_after)
        total += its
        if status != OPTIMAL:
            return FAILED, np.zeros(n), 0.0, np.zeros(m), np.zeros(n), total
        infeas = 0.0
        for i in range(m):
            if basis[i] >= n + n_slack:
                infeas += xB[i]
        scale = 1.0
        for i in range(m):
            scale = max(scale, abs(bf[i]))
        if infeas > FEAS_TOL * scale:
            return INFEASIBLE, np.zeros(n), 0.0, np.zeros(m), np.zeros(n), total
        ubf[n + n_slack:] = 0.0

    cost2 = np.zeros(N)
    cost2[:n] = c
    status, its = _iterate(Af, bf, cost2, ubf, basis, state, xB, Binv,
                           max_iter, bland_after)
    total += its
    if status != OPTIMAL:
        return status, np.zeros(n), 0.0, np.zeros(m), np.zeros(n), total

    _refactor(Af, bf, ubf, basis, state, xB, Binv)
    xs = np.zeros(N)
    for j in range(N):
        if state[j] == _AT_UPPER:
            xs[j] = ubf[j]
    for i in range(m):
        xs[basis[i]] = xB[i]
    x = lb + xs[:n]
    cB = np.empty(m)
    for i in range(m):
        cB[i] = cost2[basis[i]]
    y = cB @ Binv
    d = cost2 - y @ Af
    for i in range(m):
        d[basis[i]] = 0.0
    return OPTIMAL, x, c @ x, y * flip, d[:n].copy(), total


def solve_dense(c, A, sense, b, lb, ub, max_iter: int | None = None) -> LPSolution:
    """Dense entry point; integrality flags, if any, are the caller's concern."""
    c = np.ascontiguousarray(c, dtype=np.float64)
    A = np.ascontiguousarray(A, dtype=np.float64).reshape(len(b), len(c))
    b = np.ascontiguousarray(b, dtype=np.float64)
    sense = np.ascontiguousarray(sense, dtype=np.int64)
    lb = np.ascontiguousarray(lb, dtype=np.float64)
    ub = np.ascontiguousarray(ub, dtype=np.float64)
    if not np.all(np.isfinite(lb)):
        raise ValueError("every variable needs a finite lower bound")
    if np.any(ub < lb - FEAS_TOL):
        n = len(c)
        return LPSolution("infeasible", np.zeros(n), np.nan, np.zeros(len(b)),
                          np.zeros(n), np.zeros(n))
    ub = np.maximum(ub, lb)
    if max_iter is None:
        max_iter = 50 * (A.shape[0] + A.shape[1]) + 1000
    try:
        status, x, obj, y, d, its = _solve_dense(c, A, sense, b, lb, ub, max_iter)
    except Exception:  # singular basis during refactorisation
        status, x, obj, y, d, its = FAILED, np.zeros(len(c)), np.nan, np.zeros(len(b)), np.zeros(len(c)), 0
    if status != OPTIMAL:
        obj = np.nan
    return LPSolution(
        status=STATUS_NAMES[status],
        primal=x,
        objective=float(obj),
        row_duals=y,
        upper_bound_duals=np.maximum(-d, 0.0),
        reduced_costs=d,
        iterations=int(its),
    )


def solve_lp(model: MixedModel) -> LPSolution:
    """Solve the continuous relaxation of ``model`` (integrality ignored)."""
    return solve_dense(model.c, model.dense_A(), model.sense, model.rhs, model.lb, model.ub)


def solve_relaxed_subproblem(scenario: Scenario, x) -> tuple[float, np.ndarray, np.ndarray]:
    """Relaxed recourse value and its duals ``(value, phi, psi)`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (scenario.T.shape[1],):
        raise ValueError(f"x has length {x.size}, expected {scenario.T.shape[1]}")
    rhs = scenario.h - scenario.T @ x
    W = scenario.W
    sol = solve_dense(scenario.q, W, np.full(W.shape[0], GE), rhs,
                      scenario.y_lb, scenario.y_ub)
    if sol.status == "infeasible":
        raise RecourseError("relaxed second-stage problem is infeasible")
    if not sol.ok:
        raise RuntimeError(f"relaxed subproblem solve ended with status {sol.status}")
    return sol.objective, sol.row_duals, sol.upper_bound_duals


@njit(cache=True)
def _solve_le_via_dual(c, A, b, lb, ub, max_iter):
    """``min c x : A x <= b, lb <= x <= ub`` solved through its dual.

    With ``w = x - lb`` the dual is ``min b' y + u' s : A' y + s >= -c`` over
    ``y, s >= 0`` (one ``s`` per finite upper bound).  It has one row per
    variable, so the basis stays small however many rows ``A`` carries.  The
    primal point is read off the dual's row multipliers.
    """
    m, n = A.shape
    bs = b - A @ lb
    width = ub - lb
    k = 0
    for j in range(n):
        if np.isfinite(width[j]):
            k += 1
    D = np.zeros((n, m + k))
    D[:, :m] = A.T
    cost = np.empty(m + k)
    cost[:m] = bs
    col = m
    for j in range(n):
        if np.isfinite(width[j]):
            D[j, col] = 1.0
            cost[col] = width[j]
            col += 1
    sense = np.full(n, GE, dtype=np.int64)
    status, yy, obj, w, d, its = _solve_dense(cost, D, sense, -c, np.zeros(m + k),
                                              np.full(m + k, np.inf), max_iter)
    if status == UNBOUNDED:
        return INFEASIBLE, np.zeros(n), 0.0, its
    if status == INFEASIBLE:
        return UNBOUNDED, np.zeros(n), 0.0, its
    if status != OPTIMAL:
        return status, np.zeros(n), 0.0, its
    x = np.minimum(np.maximum(w, 0.0), width) + lb
    return OPTIMAL, x, c @ x, its


def solve_le_via_dual(c, A, b, lb, ub, max_iter: int | None = None):
    """``(status, x, objective)`` of an all-``<=`` LP with few columns and many rows."""
    c = np.ascontiguousarray(c, dtype=np.float64)
    A = np.ascontiguousarray(A, dtype=np.float64).reshape(len(b), len(c))
    b = np.ascontiguousarray(b, dtype=np.float64)
    lb = np.ascontiguousarray(lb, dtype=np.float64)
    ub = np.ascontiguousarray(ub, dtype=np.float64)
    n = len(c)
    if np.any(ub < lb - FEAS_TOL):
        return "infeasible", np.zeros(n), np.nan
    ub = np.maximum(ub, lb)
    if max_iter is None:
        max_iter = 50 * (A.shape[0] + 2 * n) + 1000
    try:
        status, x, obj, _ = _solve_le_via_dual(c, A, b, lb, ub, max_iter)
    except Exception:
        status, x, obj = FAILED, np.zeros(n), np.nan
    return STATUS_NAMES[status], x, (float(obj) if status == OPTIMAL else np.nan)


@njit(cache=True)
def _basis_inverse(A, basis):
    m = A.shape[0]
    B = np.empty((m, m))
    for i in range(m):
        B[:, i] = A[:, basis[i]]
    return np.linalg.inv(B)


@njit(cache=True)
def _basic_values(AT, b, lo, hi, basis, state, Binv, xB):
    m = b.shape[0]
    rhs = b.copy()
    for j in range(AT.shape[0]):
        if state[j] == _AT_LOWER:
            v = lo[j]
        elif state[j] == _AT_UPPER:
            v = hi[j]
        else:
            continue
        if v != 0.0:
            for i in range(m):
                rhs[i] -= AT[j, i] * v
    for i in range(m):
        acc = 0.0
        for k in range(m):
            acc += Binv[i, k] * rhs[k]
        xB[i] = acc


@njit(cache=True)
def _dual_simplex(A, AT, b, cost, lo, hi, basis, state, max_iter):
    """Bounded dual simplex on ``A v = b, lo <= v <= hi`` from a dual-feasible basis.

    ``basis`` and ``state`` are updated in place.  Nonbasic variables sit at a
    finite bound.  Returns (status, xB, iterations).
    """
    m, N = A.shape
    Binv = _basis_inverse(A, basis)
    xB = np.empty(m)
    _basic_values(AT, b, lo, hi, basis, state, Binv, xB)
    y = np.empty(m)
    rowp = np.empty(m)
    alpha = np.empty(m)
    bland = False
    degenerate = 0
    bland_after = 3 * N
    since = 0
    for it in range(max_iter):
        if since >= REFACTOR_EVERY:
            Binv = _basis_inverse(A, basis)
            _basic_values(AT, b, lo, hi, basis, state, Binv, xB)
            since = 0
        p = -1
        worst = 0.0
        for i in range(m):
            j = basis[i]
            if xB[i] < lo[j] - FEAS_TOL:
                gap = lo[j] - xB[i]
            elif xB[i] > hi[j] + FEAS_TOL:
                gap = xB[i] - hi[j]
            else:
                continue
            if bland:
                if p < 0 or j < basis[p]:
                    p = i
            elif gap > worst:
                worst = gap
                p = i
        if p < 0:
            return OPTIMAL, xB, it
        leaving = basis[p]
        below = xB[p] < lo[leaving]

        # y = c_B B^-1 and row p of B^-1
        for k in range(m):
            acc = 0.0
            for i in range(m):
                acc += cost[basis[i]] * Binv[i, k]
            y[k] = acc
            rowp[k] = Binv[p, k]
        q = -1
        best = np.inf
        a_q = 0.0
        for j in range(N):
            s = state[j]
            if s == _BASIC or hi[j] <= lo[j]:
                continue
            a = 0.0
            for k in range(m):
                a += rowp[k] * AT[j, k]
            if below:
                ok = (s == _AT_LOWER and a < -PIV_TOL) or (s == _AT_UPPER and a > PIV_TOL)
            else:
                ok = (s == _AT_LOWER and a > PIV_TOL) or (s == _AT_UPPER and a < -PIV_TOL)
            if not ok:
                continue
            dj = cost[j]
            for k in range(m):
                dj -= y[k] * AT[j, k]
            r = abs(dj) / abs(a)
            take = False
            if r < best - 1e-12:
                take = True
            elif r <= best + 1e-12 and q >= 0 and not bland:
                take = abs(a) > abs(a_q)
            if take:
                best = r
                q = j
                a_q = a
        if q < 0:
            return INFEASIBLE, xB, it

        for i in range(m):
            acc = 0.0
            for k in range(m):
                acc += Binv[i, k] * AT[q, k]
            alpha[i] = acc
        target = lo[leaving] if below else hi[leaving]
        step = (xB[p] - target) / alpha[p]
        start = lo[q] if state[q] == _AT_LOWER else hi[q]
        for i in range(m):
            xB[i] -= step * alpha[i]
        xB[p] = start + step
        state[leaving] = _AT_LOWER if below else _AT_UPPER
        state[q] = _BASIC
        basis[p] = q
        piv = alpha[p]
        for k in range(m):
            Binv[p, k] /= piv
        for i in range(m):
            if i != p and alpha[i] != 0.0:
                f = alpha[i]
                for k in range(m):
                    Binv[i, k] -= f * Binv[p, k]
        since += 1

        if best <= 1e-12:
            degenerate += 1
            if degenerate > bland_after:
                bland = True
        else:
            degenerate = 0
    return FAILED, xB, max_iter


@njit(cache=True)
def _full_point(lo, hi, basis, state, xB):
    v = np.empty(lo.shape[0])
    for j in range(lo.shape[0]):
        v[j] = lo[j] if state[j] == _AT_LOWER else hi[j]
    for i in range(basis.shape[0]):
        v[basis[i]] = xB[i]
    return v
