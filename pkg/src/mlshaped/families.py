"""Instance families and labeled-example generation.

SSLP-like (server location)
    Servers ``j < a`` with opening cost ``c_j``; clients ``i < b`` appear in a
    scenario with probability ``presence_prob``.  A present client must be
    assigned to exactly one server (``y_ij`` binary, revenue ``-q_ij``).  The
    capacity row of server ``j`` reads
    ``-sum_i d_ij y_ij + D_j y0_j >= -u_j x_j`` where ``y0_j`` in [0, 1] is a
    scaled overflow (``D_j = sum_i d_ij``) priced at ``penalty`` per unit of
    demand, which keeps every scenario feasible.  Costs, revenues, demands and
    presence draws are fixed by ``family_seed``; the instance seed only draws
    the capacities ``u``, so a family is indexed by its capacity vector.

SMKP-like (multi-knapsack covering)
    ``n1`` first-stage binaries under ``m1`` covering rows, ``n2`` binary
    recourse items covering ``m`` rows ``W y >= h - T x``.  ``W``, the
    first-stage data and the scenario costs ``q_s`` are fixed by
    ``family_seed``; the instance seed draws ``T`` and ``h``.  Only ``q``
    varies across scenarios.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .lshaped import evaluate_Q, evaluate_Q_relaxed, scenario_value
from .model import Scenario, TwoStageProblem
from .surrogate import Dataset, featurize_smkp, featurize_sslp


@dataclass(frozen=True)
class SSLPParams:
    a: int = 5
    b: int = 10
    c: int = 10
    capacity_range: tuple = (75, 300)
    cost_range: tuple = (40, 80)
    revenue_range: tuple = (1, 25)
    demand_range: tuple | None = None  # None: demand equals revenue
    presence_prob: float = 0.5
    penalty: float = 1000.0
    family_seed: int = 0

    def __post_init__(self):
        if min(self.a, self.b, self.c) < 1:
            raise ValueError("a, b and c must be at least 1")
        lo, hi = self.capacity_range
        if lo > hi:
            raise ValueError("capacity_range is empty")

    @property
    def name(self) -> str:
        return f"SSLPF({self.a},{self.b},{self.c})"


@dataclass(frozen=True)
class SMKPParams:
    n1: int = 20
    m1: int = 5
    n2: int = 15
    m: int = 5
    c: int = 10
    T_coeff_range: tuple = (1, 40)
    W_coeff_range: tuple = (20, 80)
    q_range: tuple = (1, 100)
    cost_range: tuple = (1, 100)
    A_coeff_range: tuple = (1, 20)
    A_rhs_fraction: float = 0.5
    rhs_low: float = 0.5
    rhs_slack_factor: float = 0.9
    family_seed: int = 0

    def __post_init__(self):
        if min(self.n1, self.n2, self.m, self.c) < 1 or self.m1 < 0:
            raise ValueError("dimensions must be positive")
        if not 0.0 < self.rhs_slack_factor < 1.0 or not 0.0 <= self.rhs_low <= self.rhs_slack_factor:
            raise ValueError("need 0 <= rhs_low <= rhs_slack_factor < 1")

    @property
    def name(self) -> str:
        return f"SMKPF({self.n1},{self.m1},{self.n2},{self.m},{self.c})"


def params_to_dict(params) -> dict:
    family = "sslp" if isinstance(params, SSLPParams) else "smkp"
    return {"family": family, **{k: list(v) if isinstance(v, tuple) else v
                                 for k, v in asdict(params).items()}}


def params_from_dict(data: dict):
    data = dict(data)
    family = data.pop("family")
    cls = {"sslp": SSLPParams, "smkp": SMKPParams}[family]
    fields = cls.__dataclass_fields__
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items() if k in fields}
    return cls(**kwargs)


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


# ---------------------------------------------------------------- SSLP

def _sslp_family(params: SSLPParams):
    rng = _rng(params.family_seed, 0x55)
    a, b = params.a, params.b
    cost = rng.integers(params.cost_range[0], params.cost_range[1] + 1, a).astype(float)
    revenue = rng.integers(params.revenue_range[0], params.revenue_range[1] + 1, (b, a)).astype(float)
    if params.demand_range is None:
        demand = revenue.copy()
    else:
        demand = rng.integers(params.demand_range[0], params.demand_range[1] + 1, (b, a)).astype(float)
    presence = (rng.random((params.c, b)) < params.presence_prob).astype(float)
    return cost, revenue, demand, presence


def sslp_capacities(params: SSLPParams, seed: int) -> np.ndarray:
    lo, hi = params.capacity_range
    return _rng(params.family_seed, seed, 1).integers(lo, hi + 1, params.a).astype(float)


def sslp_problem(params: SSLPParams, capacities) -> TwoStageProblem:
    """SSLP-like instance of the family for a given capacity vector."""
    a, b = params.a, params.b
    u = np.asarray(capacities, float)
    cost, revenue, demand, presence = _sslp_family(params)
    D = demand.sum(axis=0)
    ny = a * b + a
    q = np.concatenate([-revenue.ravel(), params.penalty * D])
    W = np.zeros((2 * b + a, ny))
    for i in range(b):
        W[i, i * a:(i + 1) * a] = 1.0
        W[b + i, i * a:(i + 1) * a] = -1.0
    for j in range(a):
        W[2 * b + j, j:a * b:a] = -demand[:, j]
        W[2 * b + j, a * b + j] = D[j]
    T = np.zeros((2 * b + a, a))
    T[2 * b:, :] = np.diag(u)
    y_domain = ["binary"] * (a * b) + ["unit"] * a
    scenarios = []
    for s in range(params.c):
        h = np.concatenate([presence[s], -presence[s], np.zeros(a)])
        scenarios.append(Scenario.build(q, W, T, h, y_domain))
    return TwoStageProblem.build(
        c=cost, A=np.ones((1, a)), b=[float(a)], scenarios=scenarios,
        meta={"family": "sslp", "capacities": u.tolist(), "params": params_to_dict(params)},
    )


def gen_sslp_instance(params: SSLPParams, seed: int) -> TwoStageProblem:
    return sslp_problem(params, sslp_capacities(params, seed))


# ---------------------------------------------------------------- SMKP

def _smkp_family(params: SMKPParams):
    rng = _rng(params.family_seed, 0x5B)
    W = rng.integers(params.W_coeff_range[0], params.W_coeff_range[1] + 1,
                     (params.m, params.n2)).astype(float)
    q = rng.integers(params.q_range[0], params.q_range[1] + 1, (params.c, params.n2)).astype(float)
    cost = rng.integers(params.cost_range[0], params.cost_range[1] + 1, params.n1).astype(float)
    A = rng.integers(params.A_coeff_range[0], params.A_coeff_range[1] + 1,
                     (params.m1, params.n1)).astype(float)
    rhs = np.ceil(params.A_rhs_fraction * A.sum(axis=1))
    return W, q, cost, A, rhs


def smkp_problem(params: SMKPParams, T, h) -> TwoStageProblem:
    W, q, cost, A, rhs = _smkp_family(params)
    y_domain = ["binary"] * params.n2
    scenarios = [Scenario.build(q[s], W, T, h, y_domain) for s in range(params.c)]
    return TwoStageProblem.build(
        c=cost, A=-A, b=-rhs, scenarios=scenarios,
        meta={"family": "smkp", "params": params_to_dict(params)},
    )


def smkp_technology(params: SMKPParams, seed: int):
    """Instance-specific ``(T, h)`` with ``h <= rhs_slack_factor * W 1``."""
    W = _smkp_family(params)[0]
    rng = _rng(params.family_seed, seed, 2)
    T = rng.integers(params.T_coeff_range[0], params.T_coeff_range[1] + 1,
                     (params.m, params.n1)).astype(float)
    frac = rng.uniform(params.rhs_low, params.rhs_slack_factor, params.m)
    h = np.floor(frac * W.sum(axis=1))
    return T, h


def gen_smkp_instance(params: SMKPParams, seed: int) -> TwoStageProblem:
    T, h = smkp_technology(params, seed)
    return smkp_problem(params, T, h)


def gen_instance(params, seed: int) -> TwoStageProblem:
    if isinstance(params, SSLPParams):
        return gen_sslp_instance(params, seed)
    return gen_smkp_instance(params, seed)


# ---------------------------------------------------------------- features

def features_for(problem: TwoStageProblem, x) -> np.ndarray:
    """Network input of ``problem`` at first-stage point ``x``."""
    family = problem.meta.get("family")
    if family == "sslp":
        return featurize_sslp(problem.meta["capacities"], x)
    if family == "smkp":
        s = problem.scenarios[0]
        return featurize_smkp(s.h, -s.T, x)
    raise ValueError(f"no featurizer for family {family!r}")


def binary_feature_mask(params) -> np.ndarray:
    """True at feature positions that are 0/1 and bypass input scaling."""
    if isinstance(params, SSLPParams):
        return np.concatenate([np.zeros(params.a, bool), np.ones(params.a, bool)])
    return np.zeros(params.m, bool)


# ---------------------------------------------------------------- examples

def _example_point(params, seed: int, k: int):
    rng = _rng(params.family_seed, seed, k, 3)
    inst_seed = int(rng.integers(2**62))
    n = params.a if isinstance(params, SSLPParams) else params.n1
    x = (rng.random(n) < 0.5).astype(float)
    return gen_instance(params, inst_seed), x, rng


def example_full(params, seed: int, k: int):
    problem, x, _ = _example_point(params, seed, k)
    return features_for(problem, x), np.array([evaluate_Q(problem, x)])


def example_implicit(params, seed: int, k: int):
    problem, x, rng = _example_point(params, seed, k)
    s = int(rng.integers(problem.n_scenarios))
    return features_for(problem, x), np.array([scenario_value(problem, s, x)])


def relaxed_label(problem: TwoStageProblem, x) -> np.ndarray:
    red = evaluate_Q_relaxed(problem, x)
    if red.E_phi is not None:
        return np.concatenate([[red.Q_tilde], red.E_phi, [red.E_one_psi]])
    return np.concatenate([[red.Q_tilde, red.E_phi_h], red.E_phi_T, [red.E_one_psi]])


def example_relaxed(params, seed: int, k: int):
    problem, x, _ = _example_point(params, seed, k)
    return features_for(problem, x), relaxed_label(problem, x)


_MAKERS = {"full": example_full, "implicit": example_implicit, "relaxed": example_relaxed}


def _chunk(args):
    params, labeling, seed, lo, hi = args
    make = _MAKERS[labeling]
    rows = [make(params, seed, k) for k in range(lo, hi)]
    return np.array([r[0] for r in rows]), np.array([r[1] for r in rows])


def _generate(params, n: int, labeling: str, seed: int, jobs: int = 1):
    if n < 1:
        raise ValueError("n must be at least 1")
    step = max(1, min(2000, -(-n // max(jobs, 1))))
    tasks = [(params, labeling, seed, lo, min(lo + step, n)) for lo in range(0, n, step)]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_chunk, tasks))
    else:
        parts = [_chunk(t) for t in tasks]
    X = np.concatenate([p[0] for p in parts])
    Y = np.concatenate([p[1] for p in parts])
    meta = {"labeling": labeling, "seed": int(seed), "params": params_to_dict(params),
            "binary_mask": binary_feature_mask(params).tolist()}
    return Dataset(X, Y, meta)


def gen_examples(params, n: int, labeling: str = "full", seed: int = 0, jobs: int = 1):
    """Integral-value examples; ``implicit`` labels use one random scenario each."""
    if labeling not in ("full", "implicit"):
        raise ValueError(f"unknown labeling {labeling!r}")
    return _generate(params, n, labeling, seed, jobs)


def gen_examples_relaxed(params, n: int, seed: int = 0, jobs: int = 1):
    """Relaxed-value examples labeled ``(Qt, E[phi], E[1'psi])`` for SMKP-like families."""
    return _generate(params, n, "relaxed", seed, jobs)


def split_indices(n: int, seed: int = 0, fractions=(0.64, 0.16, 0.20)):
    """Disjoint train/validation/test index arrays covering ``range(n)``."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
