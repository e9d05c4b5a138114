"""Experiment harness: per-instance runs, aggregation and report tables.

A run produces one record per (instance, method).  Aggregation turns the
records into one row per ``method:metric`` with quantiles, average, standard
error and ratio columns against a baseline method.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .families import SMKPParams, SSLPParams, gen_instance, params_from_dict, params_to_dict
from .lshaped import NoSolutionError, SolveConfig, solve, two_phase_solve
from .mip import solve_mip
from .model import build_extensive_form

QUANTILES = (0.05, 0.5, 0.95)
CSV_COLUMNS = ["metric", "q05", "q50", "q95", "avg", "stderr",
               "ratio_q05", "ratio_q50", "ratio_q95", "ratio_avg"]
EXACT_METHODS = ("Std-L", "Alt-L")
ML_METHODS = ("ML-Std-L", "ML-Alt-L")
TWO_PHASE = ("2P-ML-Std-L", "2P-ML-Alt-L", "2P-ML-Std-L+B", "2P-ML-Alt-L+B")
ORACLE = "EF"
METHODS = EXACT_METHODS + ML_METHODS + TWO_PHASE + (ORACLE,)

# metric name -> record field (dotted paths reach into wall_times)
METRICS = {
    "time": "wall_times.total",
    "objective": "first_stage_objective",
    "gap": "gap_vs_oracle",
    "nodes": "node_count",
    "integer_cuts": "n_integer_cuts",
    "continuous_cuts": "n_continuous_cuts",
    "exact_integral_solves": "n_exact_integral_solves",
    "exact_relaxed_solves": "n_exact_relaxed_solves",
    "predictions": "n_predictions",
    "exact_subproblem_time": "wall_times.exact_subproblems",
    "prediction_time": "wall_times.prediction",
    "master_time": "wall_times.master",
    "retries": "n_retries",
}
TIME_METRICS = ("time", "exact_subproblem_time", "prediction_time", "master_time")
NO_RATIO = ("gap", "retries")  # baseline values are zero up to rounding


@dataclass
class ExperimentConfig:
    family: dict
    instances: int = 50
    instance_seed: int = 1_000_000
    methods: list = field(default_factory=lambda: ["Alt-L", "ML-Alt-L"])
    baseline: str = "Alt-L"
    mu: float = 1.0
    nu: float = 1.0
    value_model: str | None = None
    relaxed_model: str | None = None
    time_limit: float = 600.0
    history_instances: int = 20
    history_seed: int = 2_000_000
    alpha: float = 0.10
    examples: int = 20_000
    labeling: str = "full"
    relaxed_examples: int = 0
    data_seed: int = 1
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.instances < 1:
            raise ValueError("instances must be at least 1")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown method(s) {unknown}; choose from {list(METHODS)}")
        if self.baseline not in METHODS:
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.labeling not in ("full", "implicit"):
            raise ValueError(f"unknown labeling {self.labeling!r}")
        eval_seeds = set(self.eval_seeds())
        if any(s in eval_seeds for s in self.history_seeds()):
            raise ValueError("evaluation and history seeds overlap")

    @property
    def params(self):
        return params_from_dict(self.family)

    def eval_seeds(self) -> list:
        return [self.instance_seed + i for i in range(self.instances)]

    def history_seeds(self) -> list:
        needs = any(m.endswith("+B") for m in self.methods)
        n = self.history_instances if needs else 0
        return [self.history_seed + i for i in range(n)]


def load_config(path, **overrides) -> ExperimentConfig:
    with open(path) as fh:
        data = json.load(fh)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**data)


def default_config(family: str = "sslp") -> ExperimentConfig:
    if family == "sslp":
        params = SSLPParams(revenue_range=(15, 60))
        return ExperimentConfig(params_to_dict(params), methods=["Std-L", "ML-Std-L"],
                                baseline="Std-L")
    if family == "smkp":
        return ExperimentConfig(params_to_dict(SMKPParams()), methods=["Alt-L", "ML-Alt-L"],
                                mu=0.98, nu=0.95, relaxed_examples=20_000)
    raise ValueError(f"unknown family {family!r}")


# ---------------------------------------------------------------- running

def load_predictor(value_model, relaxed_model):
    from .predictors import NetworkPredictor
    from .surrogate import load_network

    value = load_network(value_model) if value_model else None
    relaxed = load_network(relaxed_model) if relaxed_model else None
    if value is None and relaxed is None:
        raise ValueError("ml methods need at least one model path")
    return NetworkPredictor(value, relaxed)


def solve_extensive(problem, time_limit: float = math.inf) -> dict:
    t0 = time.monotonic()
    sol = solve_mip(build_extensive_form(problem), engine="highs")
    if sol.status != "optimal":
        raise RuntimeError(f"extensive form ended with status {sol.status}")
    n = problem.n_x
    return {
        "method": ORACLE,
        "x_star": [int(round(v)) for v in sol.primal[:n]],
        "first_stage_objective": float(sol.objective),
        "node_count": int(sol.node_count),
        "wall_times": {"total": time.monotonic() - t0},
    }


def run_method(problem, method: str, cfg: ExperimentConfig, predictor=None, history=None) -> dict:
    if method == ORACLE:
        return solve_extensive(problem, cfg.time_limit)
    base = method.removeprefix("2P-").removesuffix("+B")
    is_alt = base.endswith("Alt-L")
    if base.startswith("ML-"):
        sc = SolveConfig(is_alt=is_alt, mode="ml", mu=cfg.mu, nu=cfg.nu, predictor=predictor,
                         time_limit=cfg.time_limit)
    else:
        sc = SolveConfig(is_alt=is_alt, time_limit=cfg.time_limit)
    if method.startswith("2P-"):
        res = two_phase_solve(problem, sc, use_prob_bound=method.endswith("+B"), history=history,
                              alpha=cfg.alpha)
    else:
        res = solve(problem, sc)
    return res.to_dict()


def run_instance(cfg: ExperimentConfig, seed: int, predictor=None, history=None) -> list:
    """All methods on one instance; failures become records with an ``error`` field."""
    problem = gen_instance(cfg.params, seed)
    records = []
    for method in cfg.methods:
        try:
            rec = run_method(problem, method, cfg, predictor, history)
        except (NoSolutionError, RuntimeError) as exc:
            rec = {"method": method, "error": f"{type(exc).__name__}: {exc}"}
        rec["seed"] = seed
        records.append(rec)
    ref = _reference_objective(records)
    for rec in records:
        if "error" not in rec and ref is not None:
            rec["gap_vs_oracle"] = 100.0 * (rec["first_stage_objective"] - ref) / max(abs(ref), 1e-12)
    return records


def _reference_objective(records):
    """Extensive-form value when present, otherwise the first exact method's."""
    for name in (ORACLE,) + EXACT_METHODS:
        for rec in records:
            if rec["method"] == name and "error" not in rec:
                return rec["first_stage_objective"]
    return None


_worker_state = {}


def _worker(args):
    cfg_dict, seed, history = args
    cfg = ExperimentConfig(**cfg_dict)
    key = (cfg.value_model, cfg.relaxed_model)
    if key not in _worker_state:
        needs = any(m.removeprefix("2P-").startswith("ML-") for m in cfg.methods)
        _worker_state[key] = load_predictor(*key) if needs else None
    return run_instance(cfg, seed, _worker_state[key], history)


def exact_history(cfg: ExperimentConfig) -> list:
    """Exact optima of independent instances, used for the probabilistic bound."""
    out = []
    for seed in cfg.history_seeds():
        res = solve(gen_instance(cfg.params, seed), SolveConfig(is_alt=True, time_limit=cfg.time_limit))
        out.append(res.first_stage_objective)
    return out


def run_bench(cfg: ExperimentConfig, jobs: int = 1, progress=None) -> list:
    history = exact_history(cfg) if cfg.history_seeds() else None
    tasks = [(asdict(cfg), seed, history) for seed in cfg.eval_seeds()]
    records = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            for recs in pool.map(_worker, tasks):
                records.extend(recs)
                if progress:
                    progress(recs)
    else:
        for t in tasks:
            recs = _worker(t)
            records.extend(recs)
            if progress:
                progress(recs)
    return records


# ---------------------------------------------------------------- aggregation

@dataclass
class ReportRow:
    metric: str
    q05: float
    q50: float
    q95: float
    avg: float
    stderr: float
    ratio_q05: float = math.nan
    ratio_q50: float = math.nan
    ratio_q95: float = math.nan
    ratio_avg: float = math.nan
    n: int = 0
    failures: int = 0

    def as_csv_row(self) -> list:
        return [self.metric] + [_fmt(getattr(self, c)) for c in CSV_COLUMNS[1:]]


def _fmt(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else "nan"


def quantiles(values, qs=QUANTILES) -> np.ndarray:
    """Linear interpolation between order statistics."""
    values = np.asarray(values, float)
    if values.size == 0:
        return np.full(len(qs), math.nan)
    return np.quantile(values, qs, method="linear")


def stderr(values) -> float:
    values = np.asarray(values, float)
    if values.size < 2:
        return math.nan
    return float(values.std(ddof=1) / math.sqrt(values.size))


def _field(rec: dict, path: str):
    cur = rec
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return None
        cur = cur[part]
    return None if cur is None else float(cur)


def aggregate(records, baseline: str | None = "Alt-L", metrics=None) -> list:
    """One ReportRow per ``method:metric``; failed records are counted and skipped."""
    metrics = METRICS if metrics is None else {m: METRICS[m] for m in metrics}
    methods = list(dict.fromkeys(r["method"] for r in records))
    by_key = {(r["method"], r["seed"]): r for r in records}
    seeds = list(dict.fromkeys(r["seed"] for r in records))
    rows = []
    for method in methods:
        mine = [by_key.get((method, s)) for s in seeds]
        failures = sum(1 for r in mine if r is not None and "error" in r)
        ok = [(s, r) for s, r in zip(seeds, mine) if r is not None and "error" not in r]
        for name, path in metrics.items():
            pairs = [(s, _field(r, path)) for s, r in ok]
            pairs = [(s, v) for s, v in pairs if v is not None]
            if not pairs:
                continue
            vals = np.array([v for _, v in pairs])
            q = quantiles(vals)
            row = ReportRow(f"{method}:{name}", *q, float(vals.mean()), stderr(vals),
                            n=len(vals), failures=failures)
            ratios = _ratios(pairs, by_key, None if name in NO_RATIO else baseline, path)
            if ratios.size:
                rq = quantiles(ratios)
                row.ratio_q05, row.ratio_q50, row.ratio_q95 = rq
                row.ratio_avg = float(ratios.mean())
            rows.append(row)
    return rows


def _ratios(pairs, by_key, baseline, path) -> np.ndarray:
    """Per-instance ``100 * value / baseline value``, skipping zero baselines."""
    if baseline is None:
        return np.array([])
    out = []
    for s, v in pairs:
        ref = by_key.get((baseline, s))
        if ref is None or "error" in ref:
            continue
        b = _field(ref, path)
        if b is None or abs(b) < 1e-12:
            continue
        out.append(100.0 * v / b)
    return np.array(out)


# ---------------------------------------------------------------- files

def write_records(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_report_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow(row.as_csv_row())


def read_report_csv(path) -> list:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [ReportRow(line[0], *(float(v) for v in line[1:])) for line in r]


def render_text(rows, title: str = "") -> str:
    """Plain-text table; standard errors in parentheses next to averages."""
    lines = [title] if title else []
    head = f"{'metric':<36}{'q05':>12}{'q50':>12}{'q95':>12}{'avg (se)':>24}{'ratio q50 %':>13}{'ratio avg %':>13}"
    lines += [head, "-" * len(head)]
    for row in rows:
        avg = f"{row.avg:.4g} ({row.stderr:.2g})"
        lines.append(f"{row.metric:<36}{row.q05:>12.4g}{row.q50:>12.4g}{row.q95:>12.4g}{avg:>24}"
                     f"{row.ratio_q50:>13.4g}{row.ratio_avg:>13.4g}")
    fails = {r.metric.split(":")[0]: r.failures for r in rows if r.failures}
    for method, k in fails.items():
        lines.append(f"{method}: {k} failed instance(s) excluded")
    return "\n".join(lines) + "\n"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, entries: dict, files) -> str:
    manifest = dict(entries)
    manifest["files"] = {os.path.relpath(f, out_dir): file_sha256(f) for f in sorted(files)}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path
