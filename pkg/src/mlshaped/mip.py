"""Branch-and-bound over the simplex core.

Two drivers share the same rules (best-bound node selection with ties in
creation order, most-fractional branching with ties to the lowest index,
down child created first):

* ``solve_mip`` runs a compiled loop for plain MIPs; it is the exact
  oracle for second-stage problems.  ``engine="highs"`` hands the model to
  SciPy's HiGHS instead, which is used as an independent check for
  deterministic equivalents.
* ``solve_with_callback`` runs in Python and calls back at every node whose
  relaxation is integral, so the caller can accept the point or return lazy
  cuts that join a global pool.
"""
from __future__ import annotations

import heapq
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .lp import (FAILED, INFEASIBLE, OPTIMAL, UNBOUNDED, _dual_simplex, _full_point, _solve_dense,
                 solve_dense, solve_le_via_dual)
from .model import EQ, GE, LE, MixedModel

INT_TOL = 1e-6
GAP_TOL = 1e-7


@dataclass
class Limits:
    node_limit: int = 10_000_000
    time_limit: float = float("inf")
    gap_tol: float = GAP_TOL


@dataclass
class MIPSolution:
    status: str
    primal: np.ndarray | None
    objective: float
    node_count: int
    best_bound: float
    callback_stats: dict = field(default_factory=dict)

    @property
    def has_solution(self) -> bool:
        return self.primal is not None


@dataclass
class LazyCut:
    """Row ``coeffs @ v <= rhs`` over the model variables."""

    coeffs: np.ndarray
    rhs: float
    kind: str = "cut"

    def violation(self, v) -> float:
        return float(self.coeffs @ v - self.rhs)


@dataclass
class Accept:
    objective: float


@dataclass
class Reject:
    cuts: list


@njit(cache=True)
def _bnb(c, A, sense, b, lb, ub, is_int, node_limit, gap_tol, int_tol, max_iter):
    n = c.shape[0]
    cap = 64
    node_lb = np.empty((cap, n))
    node_ub = np.empty((cap, n))
    node_lb[0] = lb
    node_ub[0] = ub
    heap = [(-np.inf, 0)]
    next_id = 1
    best_obj = np.inf
    best_x = np.zeros(n)
    found = False
    nodes = 0
    limit_hit = False
    bound_left = np.inf
    while len(heap) > 0:
        bound, nid = heapq.heappop(heap)
        if bound >= best_obj - gap_tol:
            continue
        if nodes >= node_limit:
            limit_hit = True
            bound_left = bound
            break
        nodes += 1
        lo = node_lb[nid].copy()
        hi = node_ub[nid].copy()
        status, x, obj, y, d, its = _solve_dense(c, A, sense, b, lo, hi, max_iter)
        if status == INFEASIBLE:
            continue
        if status != OPTIMAL:
            return status, best_x, best_obj, nodes, -np.inf
        if obj >= best_obj - gap_tol:
            continue
        j_br = -1
        frac_best = int_tol
        for j in range(n):
            if is_int[j]:
                f = abs(x[j] - np.round(x[j]))
                if f > frac_best + 1e-12:
                    frac_best = f
                    j_br = j
        if j_br < 0:
            best_obj = obj
            best_x = x.copy()
            for j in range(n):
                if is_int[j]:
                    best_x[j] = np.round(x[j])
            found = True
            continue
        if next_id + 2 > cap:
            cap *= 2
            grow_lb = np.empty((cap, n))
            grow_ub = np.empty((cap, n))
            grow_lb[:next_id] = node_lb[:next_id]
            grow_ub[:next_id] = node_ub[:next_id]
            node_lb = grow_lb
            node_ub = grow_ub
        node_lb[next_id] = lo
        node_ub[next_id] = hi
        node_ub[next_id, j_br] = np.floor(x[j_br])
        heapq.heappush(heap, (obj, next_id))
        next_id += 1
        node_lb[next_id] = lo
        node_ub[next_id] = hi
        node_lb[next_id, j_br] = np.ceil(x[j_br])
        heapq.heappush(heap, (obj, next_id))
        next_id += 1
    if limit_hit:
        return -1 if found else -2, best_x, best_obj, nodes, min(bound_left, best_obj)
    if not found:
        return INFEASIBLE, best_x, np.inf, nodes, np.inf
    return OPTIMAL, best_x, best_obj, nodes, best_obj


@njit(cache=True)
def _bnb_warm(c, A, sense, b, lb, ub, is_int, node_limit, gap_tol, int_tol, max_iter):
    """Same search as ``_bnb`` but every node LP is a dual simplex warm-started
    from its parent's basis.  Needs finite bounds on the side ``c`` points to."""
    m, n = A.shape
    N = n + m
    Af = np.zeros((m, N))
    Af[:, :n] = A
    lo0 = np.empty(N)
    hi0 = np.empty(N)
    lo0[:n] = lb
    hi0[:n] = ub
    for i in range(m):
        Af[i, n + i] = -1.0
        if sense[i] == GE:
            lo0[n + i], hi0[n + i] = 0.0, np.inf
        elif sense[i] == LE:
            lo0[n + i], hi0[n + i] = -np.inf, 0.0
        else:
            lo0[n + i], hi0[n + i] = 0.0, 0.0
    AT = np.ascontiguousarray(Af.T)
    cost = np.zeros(N)
    cost[:n] = c

    cap = 64
    node_lo = np.empty((cap, n))
    node_hi = np.empty((cap, n))
    node_basis = np.empty((cap, m), dtype=np.int64)
    node_state = np.empty((cap, N), dtype=np.int64)
    node_lo[0] = lb
    node_hi[0] = ub
    for i in range(m):
        node_basis[0, i] = n + i
        node_state[0, n + i] = 2
    for j in range(n):
        node_state[0, j] = 0 if c[j] >= 0.0 else 1

    heap = [(-np.inf, 0)]
    next_id = 1
    best_obj = np.inf
    best_x = np.zeros(n)
    found = False
    nodes = 0
    limit_hit = False
    bound_left = np.inf
    lo = lo0.copy()
    hi = hi0.copy()
    while len(heap) > 0:
        bound, nid = heapq.heappop(heap)
        if bound >= best_obj - gap_tol:
            continue
        if nodes >= node_limit:
            limit_hit = True
            bound_left = bound
            break
        nodes += 1
        lo[:n] = node_lo[nid]
        hi[:n] = node_hi[nid]
        basis = node_basis[nid].copy()
        state = node_state[nid].copy()
        status, xB, its = _dual_simplex(Af, AT, b, cost, lo, hi, basis, state, max_iter)
        if status == INFEASIBLE:
            continue
        if status != OPTIMAL:
            return status, best_x, best_obj, nodes, -np.inf
        x = _full_point(lo, hi, basis, state, xB)[:n]
        obj = c @ x
        if obj >= best_obj - gap_tol:
            continue
        j_br = -1
        frac_best = int_tol
        for j in range(n):
            if is_int[j]:
                f = abs(x[j] - np.round(x[j]))
                if f > frac_best + 1e-12:
                    frac_best = f
                    j_br = j
        if j_br < 0:
            best_obj = obj
            best_x = x.copy()
            for j in range(n):
                if is_int[j]:
                    best_x[j] = np.round(x[j])
            found = True
            continue
        if next_id + 2 > cap:
            cap *= 2
            g_lo = np.empty((cap, n))
            g_hi = np.empty((cap, n))
            g_b = np.empty((cap, m), dtype=np.int64)
            g_s = np.empty((cap, N), dtype=np.int64)
            g_lo[:next_id] = node_lo[:next_id]
            g_hi[:next_id] = node_hi[:next_id]
            g_b[:next_id] = node_basis[:next_id]
            g_s[:next_id] = node_state[:next_id]
            node_lo, node_hi, node_basis, node_state = g_lo, g_hi, g_b, g_s
        for child in range(2):
            node_lo[next_id] = lo[:n]
            node_hi[next_id] = hi[:n]
            if child == 0:
                node_hi[next_id, j_br] = np.floor(x[j_br])
            else:
                node_lo[next_id, j_br] = np.ceil(x[j_br])
            node_basis[next_id] = basis
            node_state[next_id] = state
            heapq.heappush(heap, (obj, next_id))
            next_id += 1
    if limit_hit:
        return -1 if found else -2, best_x, best_obj, nodes, min(bound_left, best_obj)
    if not found:
        return INFEASIBLE, best_x, np.inf, nodes, np.inf
    return OPTIMAL, best_x, best_obj, nodes, best_obj


def _status_name(code: int) -> str:
    return {OPTIMAL: "optimal", INFEASIBLE: "infeasible", UNBOUNDED: "unbounded",
            FAILED: "failed", -1: "feasible-limit", -2: "limit"}[code]


def solve_mip(model: MixedModel, limits: Limits | None = None, engine: str = "bnb") -> MIPSolution:
    """Solve ``model`` to optimality (absolute gap ``limits.gap_tol``)."""
    limits = limits or Limits()
    if engine == "highs":
        return _solve_highs(model, limits)
    if engine != "bnb":
        raise ValueError(f"unknown engine {engine!r}")
    return solve_dense_mip(model.c, model.dense_A(), model.sense, model.rhs,
                           model.lb, model.ub, model.integer, limits)


def solve_dense_mip(c, A, sense, b, lb, ub, integer, limits: Limits | None = None) -> MIPSolution:
    """Compiled branch-and-bound on dense arrays."""
    limits = limits or Limits()
    f64 = np.float64
    c = np.ascontiguousarray(c, dtype=f64)
    b = np.ascontiguousarray(b, dtype=f64)
    lb = np.ascontiguousarray(lb, dtype=f64)
    ub = np.ascontiguousarray(ub, dtype=f64)
    sense = np.ascontiguousarray(sense, dtype=np.int64)
    integer = np.ascontiguousarray(integer, dtype=np.bool_)
    A = np.ascontiguousarray(A, dtype=f64).reshape(len(b), len(c))
    max_iter = 50 * (A.shape[0] + A.shape[1]) + 1000
    node_limit = min(limits.node_limit, 2**62)
    # warm-started dual simplex needs a finite bound wherever the cost pulls
    warm = np.all(np.isfinite(lb)) and np.all(np.isfinite(ub) | (c >= 0.0))
    kernel = _bnb_warm if warm else _bnb
    try:
        code, x, obj, nodes, bound = kernel(c, A, sense, b, lb, ub, integer, node_limit,
                                            limits.gap_tol, INT_TOL, max_iter)
    except Exception:
        return MIPSolution("failed", None, np.nan, 0, -np.inf)
    status = _status_name(int(code))
    has = status in ("optimal", "feasible-limit")
    return MIPSolution(status, x if has else None, float(obj) if has else np.nan,
                       int(nodes), float(bound))


def _solve_highs(model: MixedModel, limits: Limits) -> MIPSolution:
    from scipy.optimize import Bounds, LinearConstraint, milp

    lo = np.where(model.sense == LE, -np.inf, model.rhs)
    hi = np.where(model.sense == -LE, np.inf, model.rhs)
    options = {"mip_rel_gap": 0.0}
    if np.isfinite(limits.time_limit):
        options["time_limit"] = limits.time_limit
    cons = [LinearConstraint(model.A, lo, hi)] if model.n_rows else []
    res = milp(model.c, constraints=cons, integrality=model.integer.astype(int),
               bounds=Bounds(model.lb, model.ub), options=options)
    nodes = int(getattr(res, "mip_node_count", 0) or 0)
    if res.status == 0:
        return MIPSolution("optimal", res.x, float(res.fun), nodes, float(res.fun))
    if res.status == 2:
        return MIPSolution("infeasible", None, np.nan, nodes, np.inf)
    if res.x is not None:
        return MIPSolution("feasible-limit", res.x, float(res.fun), nodes, -np.inf)
    return MIPSolution("limit" if res.status == 1 else "failed", None, np.nan, nodes, -np.inf)


class _Rows:
    """Base rows plus an append-only pool of lazy ``<=`` rows."""

    def __init__(self, model: MixedModel):
        self.A = np.array(model.dense_A(), dtype=float)
        self.sense = model.sense.copy()
        self.rhs = model.rhs.copy()

    def add(self, cut: LazyCut) -> None:
        self.A = np.vstack([self.A, cut.coeffs[None, :]])
        self.sense = np.append(self.sense, LE)
        self.rhs = np.append(self.rhs, cut.rhs)


def _node_lp(c, rows: _Rows, lo, hi):
    # all-<= masters with many cut rows are cheaper through their dual
    if np.all(rows.sense == LE) and len(rows.rhs) > len(c):
        status, v, obj = solve_le_via_dual(c, rows.A, rows.rhs, lo, hi)
        if status in ("optimal", "infeasible"):
            return status, v, obj
    sol = solve_dense(c, rows.A, rows.sense, rows.rhs, lo, hi)
    return sol.status, sol.primal, sol.objective


def solve_with_callback(model: MixedModel, callback, limits: Limits | None = None,
                        incumbent: tuple | None = None, sep_tol: float = 1e-9) -> MIPSolution:
    """Branch-and-cut where ``callback(v, objective)`` vets every integral node.

    The callback returns ``Accept(objective)`` to propose ``v`` as incumbent
    or ``Reject(cuts)``.  Cuts join the global pool.  If none of them is
    violated at ``v`` the node is branched on an unfixed integer variable
    (and dropped when every integer variable is already fixed) instead of
    being re-solved forever; such events are counted as ``guard``.
    """
    limits = limits or Limits()
    rows = _Rows(model)
    stats: Counter = Counter()
    start = time.monotonic()

    if incumbent is not None:
        best_v = np.asarray(incumbent[0], float)
        ub_val = float(incumbent[1])
    else:
        best_v, ub_val = None, np.inf

    nodes_lo = {0: model.lb.copy()}
    nodes_hi = {0: model.ub.copy()}
    heap = [(-np.inf, 0)]
    next_id = 1
    nodes = 0
    limit_hit = False
    bound_left = np.inf
    int_idx = np.flatnonzero(model.integer)

    def push(bound, lo, hi):
        nonlocal next_id
        nodes_lo[next_id], nodes_hi[next_id] = lo, hi
        heapq.heappush(heap, (bound, next_id))
        next_id += 1

    while heap:
        bound, nid = heapq.heappop(heap)
        lo, hi = nodes_lo.pop(nid), nodes_hi.pop(nid)
        if bound >= ub_val - limits.gap_tol:
            continue
        if nodes >= limits.node_limit or time.monotonic() - start > limits.time_limit:
            limit_hit = True
            bound_left = min([bound] + [b for b, _ in heap])
            break
        nodes += 1
        while True:
            status, v, obj = _node_lp(model.c, rows, lo, hi)
            stats["lp_solves"] += 1
            if status == "infeasible":
                break
            if status != "optimal":
                raise RuntimeError(f"node relaxation ended with status {status}")
            if obj >= ub_val - limits.gap_tol:
                break
            frac = np.abs(v[int_idx] - np.round(v[int_idx]))
            if frac.size and frac.max() > INT_TOL:
                # strict comparison keeps the lowest index on ties
                k = int(np.flatnonzero(frac > frac.max() - 1e-12)[0])
                j = int(int_idx[k])
                down_hi = hi.copy()
                down_hi[j] = np.floor(v[j])
                up_lo = lo.copy()
                up_lo[j] = np.ceil(v[j])
                push(obj, lo, down_hi)
                push(obj, up_lo, hi)
                break
            v = v.copy()
            v[int_idx] = np.round(v[int_idx])
            stats["callbacks"] += 1
            res = callback(v, obj)
            if isinstance(res, Accept):
                stats["accepted"] += 1
                if res.objective < ub_val:
                    ub_val, best_v = float(res.objective), v
                    stats["incumbents"] += 1
                break
            separating = False
            for cut in res.cuts:
                rows.add(cut)
                stats[f"cuts_{cut.kind}"] += 1
                if cut.violation(v) > sep_tol:
                    separating = True
            if separating:
                continue
            stats["guard"] += 1
            free = int_idx[lo[int_idx] < hi[int_idx]]
            if free.size == 0:
                stats["discarded"] += 1
                break
            j = int(free[0])
            val = v[j]
            down_hi, up_lo = hi.copy(), lo.copy()
            if val < hi[j]:
                down_hi[j], up_lo[j] = val, val + 1
            else:
                down_hi[j], up_lo[j] = val - 1, val
            push(obj, lo, down_hi)
            push(obj, up_lo, hi)
            break

    stats["pool_size"] = len(rows.rhs) - model.n_rows
    if limit_hit:
        status = "feasible-limit" if best_v is not None else "limit"
        best_bound = min(bound_left, ub_val)
    else:
        status = "optimal" if best_v is not None else "infeasible"
        best_bound = ub_val
    return MIPSolution(status, best_v, ub_val if best_v is not None else np.nan,
                       nodes, float(best_bound), dict(stats))
