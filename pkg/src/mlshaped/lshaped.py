"""Integer L-shaped branch-and-cut, exact and with learned second-stage values.

The master is ``min c x + d z + theta`` over the first-stage rows with
``theta >= L``.  Every integral node is handed to a callback which either
accepts the point or returns an optimality cut:

* alternating mode first checks the relaxed value ``nu * Qt`` against
  ``theta`` and adds a continuous mono-cut when it is exceeded;
* otherwise the integral value ``Q`` is checked (``mu * Q <= theta``) and
  an integer L-shaped cut is added on failure.

In ``mode="exact"`` the values come from solving the scenario problems and
``mu = nu = 1``.  In ``mode="ml"`` they come from a predictor, and only the
final reported objective is evaluated exactly.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .lp import GE, RecourseError, solve_dense
from .mip import Accept, LazyCut, Limits, Reject, solve_dense_mip, solve_with_callback
from .model import LE, MixedModel, TwoStageProblem

INTEGER_EXACT = "integer-exact"
INTEGER_HEURISTIC = "integer-heuristic"
CONTINUOUS_EXACT = "continuous-exact"
CONTINUOUS_HEURISTIC = "continuous-heuristic"

RETRY_FACTOR = 0.95
RETRY_FLOOR = 0.7


class NoSolutionError(RuntimeError):
    """Every (mu, nu) in the retry schedule ended without an incumbent."""

    def __init__(self, trace):
        super().__init__(f"no feasible first-stage solution after {len(trace)} attempt(s)")
        self.trace = trace


@dataclass
class Cut:
    """``coeff_x @ x - theta <= rhs``, i.e. ``theta >= coeff_x @ x - rhs``."""

    kind: str
    coeff_x: np.ndarray
    rhs: float
    origin_x: np.ndarray
    coeff_theta: float = -1.0

    def bound(self, x) -> float:
        return float(self.coeff_x @ np.asarray(x, float) - self.rhs)

    def as_row(self, n_z: int) -> LazyCut:
        coeffs = np.concatenate([self.coeff_x, np.zeros(n_z), [self.coeff_theta]])
        return LazyCut(coeffs, float(self.rhs), self.kind)


@dataclass
class Reductions:
    """Relaxed recourse value and the aggregates that define a mono-cut."""

    Q_tilde: float
    E_phi_h: float
    E_phi_T: np.ndarray
    E_one_psi: float
    E_phi: np.ndarray | None = None


def apply_shift(prediction: float, shift: float) -> float:
    if not 0.0 < shift <= 1.0:
        raise ValueError("shift must lie in (0, 1]")
    return shift * prediction


# ---------------------------------------------------------------- evaluation

class _ScenarioData:
    """Dense float64 copies of one scenario, ready for the compiled kernels."""

    __slots__ = ("q", "W", "T", "h", "lb", "ub", "integer", "sense")

    def __init__(self, s):
        self.q = np.ascontiguousarray(s.q, dtype=np.float64)
        self.W = np.ascontiguousarray(s.W, dtype=np.float64)
        self.T = np.ascontiguousarray(s.T, dtype=np.float64)
        self.h = np.ascontiguousarray(s.h, dtype=np.float64)
        self.lb = np.zeros(len(s.q))
        self.ub = np.ascontiguousarray(s.y_ub, dtype=np.float64)
        self.integer = np.ascontiguousarray(s.y_int, dtype=np.bool_)
        self.sense = np.full(s.W.shape[0], GE, dtype=np.int64)


def _prepared(problem: TwoStageProblem):
    data = problem.__dict__.get("_dense_scenarios")
    if data is None:
        data = [_ScenarioData(s) for s in problem.scenarios]
        object.__setattr__(problem, "_dense_scenarios", data)
    return data


def _check_x(problem, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.n_x,):
        raise ValueError(f"x has length {x.size}, expected {problem.n_x}")
    if np.any((x != 0.0) & (x != 1.0)):
        raise ValueError("x must be binary")
    return x


def scenario_value(problem: TwoStageProblem, s: int, x) -> float:
    """Exact integral optimum of scenario ``s`` at first-stage point ``x``."""
    d = _prepared(problem)[s]
    rhs = d.h - d.T @ x
    sol = solve_dense_mip(d.q, d.W, d.sense, rhs, d.lb, d.ub, d.integer)
    if sol.status == "infeasible":
        raise RecourseError(f"scenario {s} has no feasible recourse at x = {x.astype(int).tolist()}")
    if sol.status != "optimal":
        raise RuntimeError(f"scenario {s} subproblem ended with status {sol.status}")
    return sol.objective


def scenario_relaxed(problem: TwoStageProblem, s: int, x):
    """``(value, phi, psi)`` of the relaxed scenario ``s`` at ``x``."""
    d = _prepared(problem)[s]
    rhs = d.h - d.T @ x
    sol = solve_dense(d.q, d.W, d.sense, rhs, d.lb, d.ub)
    if sol.status == "infeasible":
        raise RecourseError(f"relaxed scenario {s} is infeasible at x = {x.astype(int).tolist()}")
    if not sol.ok:
        raise RuntimeError(f"relaxed scenario {s} ended with status {sol.status}")
    return sol.objective, sol.row_duals, sol.upper_bound_duals


def evaluate_Q(problem: TwoStageProblem, x) -> float:
    """Expected integral recourse value ``Q(x)``."""
    x = _check_x(problem, x)
    return float(sum(p * scenario_value(problem, s, x) for s, p in enumerate(problem.probs)))


def evaluate_Q_relaxed(problem: TwoStageProblem, x) -> Reductions:
    """Expected relaxed value and the probability-weighted dual aggregates."""
    x = _check_x(problem, x)
    Qt = 0.0
    E_phi_h = 0.0
    E_phi_T = np.zeros(problem.n_x)
    E_one_psi = 0.0
    E_phi = np.zeros(len(problem.scenarios[0].h))
    for s, p in enumerate(problem.probs):
        sc = problem.scenarios[s]
        val, phi, psi = scenario_relaxed(problem, s, x)
        Qt += p * val
        E_phi_h += p * float(phi @ sc.h)
        E_phi_T += p * (phi @ sc.T)
        E_one_psi += p * float(psi.sum())
        E_phi += p * phi
    return Reductions(Qt, E_phi_h, E_phi_T, E_one_psi,
                      E_phi if problem.deterministic_hT else None)


class OraclePredictor:
    """Predictor interface backed by exact evaluation; used to test ML plumbing."""

    def predict_Q(self, problem, x) -> float:
        return evaluate_Q(problem, x)

    def predict_relaxed(self, problem, x) -> Reductions:
        return evaluate_Q_relaxed(problem, x)


# ---------------------------------------------------------------- cuts and bounds

def make_integer_cut(x_star, Q_value: float, L: float, kind: str = INTEGER_EXACT) -> Cut:
    x_star = np.asarray(x_star, float)
    if Q_value < L - 1e-9:
        raise ValueError(f"cut value {Q_value} lies below the lower bound {L}")
    gap = max(Q_value - L, 0.0)
    S = x_star > 0.5
    coeff = np.where(S, gap, -gap)
    rhs = gap * S.sum() - Q_value
    return Cut(kind, coeff, float(rhs), x_star.copy())


def make_continuous_cut(red: Reductions, problem: TwoStageProblem | None = None,
                        deterministic_hT: bool = False, origin_x=None,
                        kind: str = CONTINUOUS_EXACT) -> Cut:
    """Mono-cut ``E[phi h] - E[phi T] x - E[1'psi] <= theta``.

    With ``deterministic_hT`` the coefficients are rebuilt from ``E[phi]`` and
    the shared ``h`` and ``T`` of ``problem``.
    """
    if deterministic_hT:
        if problem is None or red.E_phi is None:
            raise ValueError("the reduced form needs E_phi and the problem's h and T")
        h, T = problem.scenarios[0].h, problem.scenarios[0].T
        E_phi = np.asarray(red.E_phi, float)
        if E_phi.shape != h.shape:
            raise ValueError(f"E_phi has length {E_phi.size}, expected {h.size}")
        coeff = -(E_phi @ T)
        rhs = red.E_one_psi - float(E_phi @ h)
    else:
        coeff = -np.asarray(red.E_phi_T, float)
        if problem is not None and coeff.shape != (problem.n_x,):
            raise ValueError(f"E_phi_T has length {coeff.size}, expected {problem.n_x}")
        rhs = red.E_one_psi - red.E_phi_h
    origin = np.zeros(len(coeff)) if origin_x is None else np.asarray(origin_x, float).copy()
    return Cut(kind, np.asarray(coeff, float), float(rhs), origin)


def compute_lower_bound_L(problem: TwoStageProblem) -> float:
    """Sum over scenarios of ``min q y : T x + W y >= h`` with ``x`` in the unit box."""
    n = problem.n_x
    L = 0.0
    for s, p in enumerate(problem.probs):
        sc = problem.scenarios[s]
        A = np.hstack([sc.T, sc.W])
        c = np.concatenate([np.zeros(n), sc.q])
        lb = np.zeros(n + len(sc.q))
        ub = np.concatenate([np.ones(n), sc.y_ub])
        sol = solve_dense(c, A, np.full(len(sc.h), GE), sc.h, lb, ub)
        if sol.status == "unbounded":
            raise ValueError(f"scenario {s}: relaxed recourse is unbounded below, no finite L")
        if not sol.ok:
            raise RuntimeError(f"scenario {s}: lower-bound LP ended with status {sol.status}")
        L += p * sol.objective
    return float(L)


def chebyshev_lower_bound(samples, alpha: float = 0.10) -> float:
    """One-sided Chebyshev (Cantelli) bound ``mean - sqrt((1-alpha)/alpha) * sd``.

    ``sd`` is the sample standard deviation (ddof = 1).
    """
    samples = np.asarray(samples, float)
    if samples.size < 2:
        raise ValueError("need at least two samples")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    sd = samples.std(ddof=1)
    mean = samples.mean()
    if sd == 0.0:
        return float(mean)
    return float(mean - np.sqrt((1.0 - alpha) / alpha) * sd)


def default_retry_schedule(mu: float, nu: float, factor: float = RETRY_FACTOR,
                           floor: float = RETRY_FLOOR) -> list:
    """``(mu, nu)``, then both scaled by ``factor`` per retry, ending at ``floor``."""
    out = [(mu, nu)]
    while True:
        m, n = out[-1][0] * factor, out[-1][1] * factor
        if m < floor or n < floor:
            break
        out.append((m, n))
    last = out[-1]
    if last[0] > floor and last[1] > floor:
        out.append((floor, floor))
    return out


# ---------------------------------------------------------------- solver

@dataclass
class SolveConfig:
    is_alt: bool = False
    mode: str = "exact"
    mu: float = 1.0
    nu: float = 1.0
    predictor: object = None
    retry_schedule: list | None = None
    time_limit: float = float("inf")
    node_limit: int = 10_000_000
    guard_limit: int | None = None  # None: 200 in ml mode, unlimited in exact mode
    fallthrough: bool = False  # non-separating continuous cut -> integer step instead of rejecting

    def __post_init__(self):
        if self.mode not in ("exact", "ml"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (0.0 < self.mu <= 1.0 and 0.0 < self.nu <= 1.0):
            raise ValueError("mu and nu must lie in (0, 1]")
        if self.mode == "ml" and self.predictor is None:
            raise ValueError("ml mode needs a predictor")
        if self.retry_schedule is not None:
            sched = [tuple(map(float, p)) for p in self.retry_schedule]
            for (m0, n0), (m1, n1) in zip(sched, sched[1:]):
                if not (m1 < m0 and n1 < n0):
                    raise ValueError("retry schedule must decrease strictly in mu and nu")
            if any(not (0 < m <= 1 and 0 < n <= 1) for m, n in sched):
                raise ValueError("retry schedule values must lie in (0, 1]")
            self.retry_schedule = sched

    def schedule(self) -> list:
        if self.mode == "exact":
            return [(1.0, 1.0)]
        if self.retry_schedule is not None:
            return list(self.retry_schedule)
        return default_retry_schedule(self.mu, self.nu)

    @property
    def method(self) -> str:
        name = "Alt-L" if self.is_alt else "Std-L"
        return name if self.mode == "exact" else "ML-" + name


@dataclass
class SolveResult:
    method: str
    x_star: np.ndarray
    z_star: np.ndarray
    first_stage_objective: float
    master_objective: float
    node_count: int
    n_integer_cuts: int
    n_continuous_cuts: int
    n_exact_integral_solves: int
    n_exact_relaxed_solves: int
    n_final_exact_solves: int
    n_predictions: int
    n_retries: int
    mu: float
    nu: float
    L: float
    wall_times: dict
    attempts: list = field(default_factory=list)
    gap_vs_oracle: float | None = None

    @property
    def n_exact_subproblem_solves(self) -> int:
        """Exact scenario solves performed inside the tree search."""
        return self.n_exact_integral_solves + self.n_exact_relaxed_solves

    def to_dict(self) -> dict:
        out = asdict(self)
        out["x_star"] = [int(round(v)) for v in self.x_star]
        out["z_star"] = [float(v) for v in self.z_star]
        out["n_exact_subproblem_solves"] = self.n_exact_subproblem_solves
        return out


class _AttemptAborted(Exception):
    pass


class _Engine:
    """State shared by the attempts of one solve: caches, counters, timers."""

    def __init__(self, problem: TwoStageProblem, config: SolveConfig):
        self.problem = problem
        self.config = config
        self.Q_cache: dict = {}
        self.R_cache: dict = {}
        self.n_int = 0
        self.n_rel = 0
        self.n_pred = 0
        self.t_exact = 0.0
        self.t_pred = 0.0

    def exact_Q(self, x) -> float:
        key = x.astype(np.int8).tobytes()
        if key not in self.Q_cache:
            t0 = time.monotonic()
            self.Q_cache[key] = evaluate_Q(self.problem, x)
            self.t_exact += time.monotonic() - t0
            self.n_int += self.problem.n_scenarios
        return self.Q_cache[key]

    def exact_relaxed(self, x) -> Reductions:
        key = x.astype(np.int8).tobytes()
        if key not in self.R_cache:
            t0 = time.monotonic()
            self.R_cache[key] = evaluate_Q_relaxed(self.problem, x)
            self.t_exact += time.monotonic() - t0
            self.n_rel += self.problem.n_scenarios
        return self.R_cache[key]

    def value(self, x) -> float:
        if self.config.mode == "exact":
            return self.exact_Q(x)
        t0 = time.monotonic()
        val = float(self.config.predictor.predict_Q(self.problem, x))
        self.t_pred += time.monotonic() - t0
        self.n_pred += 1
        return val

    def relaxed(self, x) -> Reductions:
        if self.config.mode == "exact":
            return self.exact_relaxed(x)
        t0 = time.monotonic()
        red = self.config.predictor.predict_relaxed(self.problem, x)
        self.t_pred += time.monotonic() - t0
        self.n_pred += 1
        return red


def build_master(problem: TwoStageProblem, L: float) -> MixedModel:
    """First-stage model over ``[x, z, theta]`` with ``theta >= L``."""
    n, p = problem.n_x, problem.n_z
    A = np.hstack([problem.A, problem.C, np.zeros((len(problem.b), 1))])
    return MixedModel(
        c=np.concatenate([problem.c, problem.d, [1.0]]),
        A=A,
        sense=np.full(len(problem.b), LE),
        rhs=problem.b,
        lb=np.concatenate([np.zeros(n + p), [L]]),
        ub=np.concatenate([np.ones(n), problem.z_ub, [np.inf]]),
        integer=np.concatenate([np.ones(n, bool), problem.z_int, [False]]),
    )


def _add_objective_floor(master: MixedModel, B: float) -> MixedModel:
    row = -master.c[None, :]
    return MixedModel(master.c, np.vstack([master.dense_A(), row]),
                      np.append(master.sense, LE), np.append(master.rhs, -B),
                      master.lb, master.ub, master.integer)


def _make_callback(engine: _Engine, L: float, mu: float, nu: float, stats: dict):
    problem = engine.problem
    config = engine.config
    n, p = problem.n_x, problem.n_z
    heuristic = config.mode == "ml"
    int_kind = INTEGER_HEURISTIC if heuristic else INTEGER_EXACT
    cont_kind = CONTINUOUS_HEURISTIC if heuristic else CONTINUOUS_EXACT
    det = problem.deterministic_hT

    def callback(v, obj):
        x = np.round(v[:n])
        z = v[n:n + p]
        theta = v[-1]
        if config.is_alt:
            red = engine.relaxed(x)
            Qt = red.Q_tilde
            if apply_shift(Qt, nu) > theta + 1e-8 * max(1.0, abs(Qt)):
                use_det = det and red.E_phi is not None
                cut = make_continuous_cut(red, problem, use_det, x, cont_kind)
                # predicted reductions need not agree with the predicted value;
                # optionally a cut that does not separate falls through to the integer step
                if not config.fallthrough or cut.bound(x) > theta + 1e-9:
                    stats["continuous"] += 1
                    return Reject([cut.as_row(p)])
                stats["fallthrough"] += 1
        Q = engine.value(x)
        if apply_shift(Q, mu) <= theta + 1e-8 * max(1.0, abs(Q)):
            return Accept(problem.first_stage_cost(x, z) + theta)
        cut = make_integer_cut(x, max(Q, L), L, int_kind)
        stats["integer"] += 1
        return Reject([cut.as_row(p)])

    guard_limit = config.guard_limit
    if guard_limit is None and heuristic:
        guard_limit = 200

    def guarded(v, obj):
        res = callback(v, obj)
        if isinstance(res, Reject) and guard_limit is not None:
            row = res.cuts[0]
            if row.violation(v) <= 1e-9:
                stats["guard"] += 1
                if stats["guard"] > guard_limit and not stats["accepted"]:
                    raise _AttemptAborted
        elif isinstance(res, Accept):
            stats["accepted"] += 1
        return res

    return guarded


def solve(problem: TwoStageProblem, config: SolveConfig, L: float | None = None,
          incumbent: tuple | None = None, objective_floor: float | None = None) -> SolveResult:
    """Branch-and-cut over the master with exact or predicted recourse.

    ``incumbent`` is an optional ``(x, z, value)`` warm start and
    ``objective_floor`` adds ``c x + d z + theta >= B``.
    """
    t_start = time.monotonic()
    engine = _Engine(problem, config)
    t0 = time.monotonic()
    if L is None:
        L = compute_lower_bound_L(problem)
    t_L = time.monotonic() - t0
    master = build_master(problem, L)
    if objective_floor is not None:
        master = _add_objective_floor(master, objective_floor)
    warm = None
    if incumbent is not None:
        x0, z0, val = incumbent
        theta0 = val - problem.first_stage_cost(x0, z0)
        warm = (np.concatenate([np.asarray(x0, float), np.asarray(z0, float), [theta0]]), val)

    deadline = t_start + config.time_limit
    trace = []
    sol = None
    n_cuts = {"integer": 0, "continuous": 0}
    nodes = 0
    for attempt, (mu, nu) in enumerate(config.schedule()):
        stats = {"integer": 0, "continuous": 0, "guard": 0, "accepted": 0, "fallthrough": 0}
        callback = _make_callback(engine, L, mu, nu, stats)
        limits = Limits(node_limit=config.node_limit,
                        time_limit=max(deadline - time.monotonic(), 0.0))
        try:
            sol = solve_with_callback(master, callback, limits, incumbent=warm)
            status = sol.status
            nodes += sol.node_count
        except _AttemptAborted:
            sol, status = None, "aborted"
        n_cuts["integer"] += stats["integer"]
        n_cuts["continuous"] += stats["continuous"]
        trace.append({"mu": mu, "nu": nu, "status": status, **stats})
        if sol is not None and sol.has_solution:
            break
        if time.monotonic() > deadline:
            break
    if sol is None or not sol.has_solution:
        raise NoSolutionError(trace)

    n, p = problem.n_x, problem.n_z
    x_star = np.round(sol.primal[:n])
    z_star = sol.primal[n:n + p].copy()
    t0 = time.monotonic()
    Q_final = evaluate_Q(problem, x_star)
    t_final = time.monotonic() - t0
    total = time.monotonic() - t_start
    wall = {
        "total": total,
        "lower_bound": t_L,
        "exact_subproblems": engine.t_exact,
        "prediction": engine.t_pred,
        "final_evaluation": t_final,
        "master": total - t_L - engine.t_exact - engine.t_pred - t_final,
    }
    return SolveResult(
        method=config.method,
        x_star=x_star,
        z_star=z_star,
        first_stage_objective=problem.first_stage_cost(x_star, z_star) + Q_final,
        master_objective=float(sol.objective),
        node_count=nodes,
        n_integer_cuts=n_cuts["integer"],
        n_continuous_cuts=n_cuts["continuous"],
        n_exact_integral_solves=engine.n_int,
        n_exact_relaxed_solves=engine.n_rel,
        n_final_exact_solves=problem.n_scenarios,
        n_predictions=engine.n_pred,
        n_retries=len(trace) - 1,
        mu=trace[-1]["mu"],
        nu=trace[-1]["nu"],
        L=L,
        wall_times=wall,
        attempts=trace,
    )


def two_phase_solve(problem: TwoStageProblem, config: SolveConfig, use_prob_bound: bool = False,
                    history=None, alpha: float = 0.10) -> SolveResult:
    """ML solve, then an exact solve warm-started from its first-stage point."""
    if use_prob_bound and not history:
        raise ValueError("the probabilistic bound needs a history of optimal values")
    t_start = time.monotonic()
    first = solve(problem, config)
    exact_cfg = SolveConfig(is_alt=config.is_alt, mode="exact", time_limit=config.time_limit,
                            node_limit=config.node_limit, fallthrough=config.fallthrough)
    B = chebyshev_lower_bound(history, alpha) if use_prob_bound else None
    second = solve(problem, exact_cfg, L=first.L,
                   incumbent=(first.x_star, first.z_star, first.first_stage_objective),
                   objective_floor=B)
    second.method = ("2P-" + first.method) + ("+B" if use_prob_bound else "")
    second.wall_times = {
        **{f"phase2_{k}": v for k, v in second.wall_times.items()},
        **{f"phase1_{k}": v for k, v in first.wall_times.items()},
        "total": time.monotonic() - t_start,
    }
    second.n_predictions = first.n_predictions
    second.n_final_exact_solves += first.n_final_exact_solves
    second.attempts = first.attempts + second.attempts
    return second
