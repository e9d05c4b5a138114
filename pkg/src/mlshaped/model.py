"""Two-stage stochastic MILP data and its deterministic equivalent.

A problem is

    min  c x + d z + E_s[ min_y q_s y : W_s y >= h_s - T_s x, y in Y_s ]
    s.t. A x + C z <= b,  x binary,  z >= 0 (optionally integer)

with a finite list of scenarios.  Matrices are held densely in memory
(desk-scale instances); the JSON instance format stores them as
``[row, col, value]`` triplets.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

LE = 1
GE = -1
EQ = 0

_SENSE_CODES = {"<=": LE, ">=": GE, "=": EQ, LE: LE, GE: GE, EQ: EQ}


class StructureError(ValueError):
    """Inconsistent dimensions or probabilities in a problem statement."""


def parse_domain(descriptors) -> tuple[np.ndarray, np.ndarray]:
    """Turn domain descriptors into ``(upper_bounds, is_integer)``.

    Accepted descriptors: ``"binary"``, ``"unit"`` (continuous in [0, 1]),
    ``"continuous"``, ``"integer"``, or a dict ``{"type": ..., "ub": ...}``.
    """
    ub = np.empty(len(descriptors))
    integer = np.zeros(len(descriptors), dtype=bool)
    for k, desc in enumerate(descriptors):
        if isinstance(desc, dict):
            kind = desc["type"]
            bound = float(desc.get("ub", np.inf))
        else:
            kind, bound = desc, np.inf
        if kind == "binary":
            ub[k], integer[k] = 1.0, True
        elif kind == "unit":
            ub[k] = 1.0
        elif kind == "continuous":
            ub[k] = bound
        elif kind == "integer":
            ub[k], integer[k] = bound, True
        else:
            raise StructureError(f"unknown domain descriptor {desc!r}")
    return ub, integer


def describe_domain(ub, integer) -> list:
    out = []
    for u, i in zip(ub, integer):
        if i and u == 1.0:
            out.append("binary")
        elif not i and u == 1.0:
            out.append("unit")
        elif np.isinf(u):
            out.append("integer" if i else "continuous")
        else:
            out.append({"type": "integer" if i else "continuous", "ub": float(u)})
    return out


@dataclass(frozen=True, eq=False)
class Scenario:
    q: np.ndarray
    W: np.ndarray
    T: np.ndarray
    h: np.ndarray
    y_ub: np.ndarray
    y_int: np.ndarray

    @classmethod
    def build(cls, q, W, T, h, y_domain) -> "Scenario":
        y_ub, y_int = parse_domain(y_domain)
        return cls(np.asarray(q, float), np.atleast_2d(np.asarray(W, float)),
                   np.atleast_2d(np.asarray(T, float)), np.asarray(h, float), y_ub, y_int)

    @property
    def y_lb(self) -> np.ndarray:
        return np.zeros(len(self.q))

    @property
    def y_domain(self) -> list:
        return describe_domain(self.y_ub, self.y_int)

    def check(self, n_x: int) -> None:
        m, ny = self.W.shape
        if len(self.q) != ny or len(self.y_ub) != ny:
            raise StructureError(f"q/y_domain length {len(self.q)} does not match W columns {ny}")
        if len(self.h) != m:
            raise StructureError(f"h length {len(self.h)} does not match W rows {m}")
        if self.T.shape != (m, n_x):
            raise StructureError(f"T has shape {self.T.shape}, expected {(m, n_x)}")


@dataclass(frozen=True, eq=False)
class TwoStageProblem:
    c: np.ndarray
    d: np.ndarray
    A: np.ndarray
    C: np.ndarray
    b: np.ndarray
    z_ub: np.ndarray
    z_int: np.ndarray
    scenarios: tuple
    probs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, p, m1 = len(self.c), len(self.d), len(self.b)
        if self.A.shape != (m1, n):
            raise StructureError(f"A has shape {self.A.shape}, expected {(m1, n)}")
        if self.C.shape != (m1, p):
            raise StructureError(f"C has shape {self.C.shape}, expected {(m1, p)}")
        if len(self.z_ub) != p or len(self.z_int) != p:
            raise StructureError("z_domain length does not match d")
        if len(self.scenarios) == 0:
            raise StructureError("at least one scenario is required")
        if len(self.probs) != len(self.scenarios):
            raise StructureError("one probability per scenario is required")
        if np.any(self.probs <= 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise StructureError("scenario probabilities must be positive and sum to 1")
        ref = self.scenarios[0].W.shape
        for s, scen in enumerate(self.scenarios):
            try:
                scen.check(n)
            except StructureError as exc:
                raise StructureError(f"scenario {s}: {exc}") from None
            if scen.W.shape != ref:
                raise StructureError(f"scenario {s}: W shape {scen.W.shape} differs from scenario 0 {ref}")

    @classmethod
    def build(cls, c, A, b, scenarios, probs=None, d=None, C=None, z_domain=(), meta=None):
        c = np.asarray(c, float)
        b = np.asarray(b, float)
        d = np.zeros(0) if d is None else np.asarray(d, float)
        A = np.asarray(A, float).reshape(len(b), len(c))
        C = np.zeros((len(b), len(d))) if C is None else np.asarray(C, float).reshape(len(b), len(d))
        z_ub, z_int = parse_domain(list(z_domain)) if len(d) else (np.zeros(0), np.zeros(0, bool))
        if probs is None:
            probs = np.full(len(scenarios), 1.0 / len(scenarios))
        return cls(c, d, A, C, b, z_ub, z_int, tuple(scenarios),
                   np.asarray(probs, float), dict(meta or {}))

    @property
    def n_x(self) -> int:
        return len(self.c)

    @property
    def n_z(self) -> int:
        return len(self.d)

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)

    @property
    def deterministic_hT(self) -> bool:
        s0 = self.scenarios[0]
        return all(np.array_equal(s.h, s0.h) and np.array_equal(s.T, s0.T)
                   for s in self.scenarios[1:])

    def first_stage_cost(self, x, z=None) -> float:
        val = float(self.c @ np.asarray(x, float))
        if self.n_z:
            val += float(self.d @ np.asarray(z, float))
        return val


@dataclass(eq=False)
class MixedModel:
    """``min c v : A v (sense) rhs, lb <= v <= ub``, some ``v`` integer."""

    c: np.ndarray
    A: sp.csr_matrix
    sense: np.ndarray
    rhs: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integer: np.ndarray
    _dense: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.c = np.asarray(self.c, float)
        self.A = sp.csr_matrix(self.A, dtype=float)
        self.sense = np.array([_SENSE_CODES[s] for s in self.sense], dtype=np.int64)
        self.rhs = np.asarray(self.rhs, float)
        self.lb = np.asarray(self.lb, float)
        self.ub = np.asarray(self.ub, float)
        self.integer = np.asarray(self.integer, bool)
        n = len(self.c)
        if self.A.shape != (len(self.rhs), n) or len(self.sense) != len(self.rhs):
            raise StructureError("constraint matrix, senses and rhs disagree in shape")
        if not (len(self.lb) == len(self.ub) == len(self.integer) == n):
            raise StructureError("bounds and integrality flags must have one entry per variable")
        if np.any(self.integer & ~(np.isfinite(self.lb) & np.isfinite(self.ub))):
            raise StructureError("every integer variable needs finite bounds")

    @property
    def n_vars(self) -> int:
        return len(self.c)

    @property
    def n_rows(self) -> int:
        return len(self.rhs)

    def dense_A(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.A.toarray()
        return self._dense

    def objective(self, v) -> float:
        return float(self.c @ np.asarray(v, float))


def build_extensive_form(problem: TwoStageProblem) -> MixedModel:
    """Deterministic equivalent with variables ``[x, z, y_1, ..., y_S]``."""
    n, p = problem.n_x, problem.n_z
    m1 = len(problem.b)
    blocks_c = [problem.c, problem.d]
    lb = [np.zeros(n), np.zeros(p)]
    ub = [np.ones(n), problem.z_ub]
    integer = [np.ones(n, bool), problem.z_int]
    ny = [len(s.q) for s in problem.scenarios]
    total = n + p + sum(ny)

    rows = [sp.hstack([sp.csr_matrix(problem.A), sp.csr_matrix(problem.C),
                       sp.csr_matrix((m1, sum(ny)))], format="csr")]
    rhs = [problem.b]
    sense = [np.full(m1, LE)]
    offset = n + p
    for prob, scen, k in zip(problem.probs, problem.scenarios, ny):
        m = len(scen.h)
        block = sp.lil_matrix((m, total))
        block[:, :n] = scen.T
        block[:, offset:offset + k] = scen.W
        rows.append(block.tocsr())
        rhs.append(scen.h)
        sense.append(np.full(m, GE))
        blocks_c.append(prob * scen.q)
        lb.append(np.zeros(k))
        ub.append(scen.y_ub)
        integer.append(scen.y_int)
        offset += k
    return MixedModel(
        c=np.concatenate(blocks_c),
        A=sp.vstack(rows, format="csr"),
        sense=np.concatenate(sense),
        rhs=np.concatenate(rhs),
        lb=np.concatenate(lb),
        ub=np.concatenate(ub),
        integer=np.concatenate(integer),
    )


@dataclass
class RecourseReport:
    feasible: bool
    n_checked: int
    violation: tuple | None = None   # (x, scenario_index)


def check_relatively_complete_recourse(problem: TwoStageProblem, samples: int,
                                       seed: int = 0) -> RecourseReport:
    """Sample binary ``x`` and test every relaxed second-stage problem for feasibility."""
    from .lp import RecourseError, solve_relaxed_subproblem

    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    for k in range(samples):
        x = rng.integers(0, 2, problem.n_x).astype(float)
        for s, scen in enumerate(problem.scenarios):
            try:
                solve_relaxed_subproblem(scen, x)
            except RecourseError:
                return RecourseReport(False, k + 1, (x, s))
    return RecourseReport(True, samples)


# --- JSON instance files -------------------------------------------------

def _triplets(M: np.ndarray) -> list:
    r, c = np.nonzero(M)
    return [[int(i), int(j), float(M[i, j])] for i, j in zip(r, c)]


def _from_triplets(trip, shape) -> np.ndarray:
    M = np.zeros(shape)
    for i, j, v in trip:
        M[int(i), int(j)] = float(v)
    return M


def problem_to_dict(problem: TwoStageProblem) -> dict:
    return {
        "n_x": problem.n_x,
        "c": [float(v) for v in problem.c],
        "d": [float(v) for v in problem.d],
        "A": _triplets(problem.A),
        "C": _triplets(problem.C),
        "b": [float(v) for v in problem.b],
        "z_domain": describe_domain(problem.z_ub, problem.z_int),
        "scenarios": [
            {
                "prob": float(p),
                "q": [float(v) for v in s.q],
                "W": _triplets(s.W),
                "T": _triplets(s.T),
                "h": [float(v) for v in s.h],
                "y_domain": s.y_domain,
            }
            for p, s in zip(problem.probs, problem.scenarios)
        ],
        "meta": problem.meta,
    }


def problem_from_dict(data: dict) -> TwoStageProblem:
    n = int(data["n_x"])
    c = [float(v) for v in data["c"]]
    if len(c) != n:
        raise StructureError(f"c has length {len(c)} but n_x = {n}")
    b = [float(v) for v in data["b"]]
    d = [float(v) for v in data.get("d", [])]
    scenarios, probs = [], []
    for s, raw in enumerate(data["scenarios"]):
        q = [float(v) for v in raw["q"]]
        h = [float(v) for v in raw["h"]]
        try:
            scen = Scenario.build(q, _from_triplets(raw["W"], (len(h), len(q))),
                                  _from_triplets(raw["T"], (len(h), n)), h, raw["y_domain"])
        except (IndexError, StructureError) as exc:
            raise StructureError(f"scenario {s}: {exc}") from None
        scenarios.append(scen)
        probs.append(float(raw["prob"]))
    return TwoStageProblem.build(
        c=c, A=_from_triplets(data.get("A", []), (len(b), n)), b=b, scenarios=scenarios,
        probs=probs, d=d, C=_from_triplets(data.get("C", []), (len(b), len(d))),
        z_domain=data.get("z_domain", []), meta=data.get("meta", {}),
    )


def save_problem(problem: TwoStageProblem, path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(problem)))


def load_problem(path) -> TwoStageProblem:
    return problem_from_dict(json.loads(Path(path).read_text()))
