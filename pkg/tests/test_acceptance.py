"""Acceptance measurements at desk scale.

Datasets and trained networks are cached under ``.acceptance_cache/`` (or
``$MLSHAPED_ACCEPTANCE_CACHE``) together with the wall time it took to build
them, so later runs only repeat the solves.  Each test prints one pass/fail
line in the terminal summary (see ``conftest.py``).
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from mlshaped.bench import solve_extensive
from mlshaped.families import (SMKPParams, SSLPParams, binary_feature_mask, features_for, gen_examples,
                               gen_examples_relaxed, gen_instance, split_indices)
from mlshaped.lp import GE, LE, solve_dense
from mlshaped import lshaped
from mlshaped.lshaped import (OraclePredictor, SolveConfig, chebyshev_lower_bound, evaluate_Q,
                              evaluate_Q_relaxed, scenario_value, solve)
from mlshaped.predictors import InflatedPredictor, NetworkPredictor
from mlshaped.surrogate import (NetworkSpec, TrainConfig, abs_relative_error, load_dataset, load_network,
                                loss_and_grad, normalized_l1_error, save_dataset, save_network, train)

from oracles import binary_points, gradient_fd_errors, lp_dual_value, lp_dual_vertices, lp_vertex_min, random_lp

pytestmark = pytest.mark.slow

CACHE = Path(os.environ.get("MLSHAPED_ACCEPTANCE_CACHE",
                            Path(__file__).resolve().parents[1] / ".acceptance_cache"))

SSLP10 = SSLPParams(a=5, b=10, c=10, revenue_range=(15, 60))
SSLP50 = SSLPParams(a=5, b=10, c=50, revenue_range=(15, 60))
SMKP_SMALL = SMKPParams(n1=10, m1=3)
SMKP20 = SMKPParams()
EVAL_SEEDS = list(range(1_000_000, 1_000_050))
RETRY_SEEDS = list(range(3_000_000, 3_000_010))
N_EXAMPLES = 20_000
TRAIN_CFG = TrainConfig(patience=150, max_epochs=2000, seed=0)


# ---------------------------------------------------------------- cached artifacts

def _build_log() -> dict:
    path = CACHE / "build_times.json"
    return json.loads(path.read_text()) if path.exists() else {}


def _log_build(name: str, seconds: float, **extra) -> None:
    log = _build_log()
    log[name] = {"seconds": seconds, **extra}
    (CACHE / "build_times.json").write_text(json.dumps(log, indent=2, sort_keys=True))


def cached_dataset(name: str, make):
    CACHE.mkdir(parents=True, exist_ok=True)
    path = CACHE / f"{name}.npz"
    if not path.exists():
        t0 = time.monotonic()
        ds = make()
        save_dataset(ds, path)
        _log_build(name, time.monotonic() - t0, rows=len(ds))
    return load_dataset(path)


def cached_network(name: str, ds, params, layers: int, units: int, family: str):
    path = CACHE / f"{name}.json"
    tr, va, te = split_indices(len(ds), 0)
    if not path.exists():
        t0 = time.monotonic()
        spec = NetworkSpec(ds.feature_len, ds.label_len, layers, units)
        net = train(ds.subset(tr), ds.subset(va), spec, TRAIN_CFG, binary_feature_mask(params), family)
        save_network(net, path)
        test = ds.subset(te)
        _log_build(name, time.monotonic() - t0, best_epoch=net.history["best_epoch"],
                   test_abs_rel_error=abs_relative_error(net, test).tolist(),
                   test_normalized_l1=normalized_l1_error(net, test).tolist())
    return load_network(path, family=family)


def build_seconds(*names) -> float:
    log = _build_log()
    return sum(log[n]["seconds"] for n in names)


@pytest.fixture(scope="module")
def sslp10_predictor():
    ds = cached_dataset("sslp10_full", lambda: gen_examples(SSLP10, N_EXAMPLES, "full", seed=1))
    return NetworkPredictor(cached_network("sslp10_ip", ds, SSLP10, 4, 64, "sslp"))


@pytest.fixture(scope="module")
def sslp50_implicit_predictor():
    ds = cached_dataset("sslp50_implicit", lambda: gen_examples(SSLP50, N_EXAMPLES, "implicit", seed=1))
    return NetworkPredictor(cached_network("sslp50_ip_implicit", ds, SSLP50, 4, 64, "sslp"))


@pytest.fixture(scope="module")
def smkp_relaxed_data():
    return cached_dataset("smkp20_relaxed", lambda: gen_examples_relaxed(SMKP20, N_EXAMPLES, seed=2))


@pytest.fixture(scope="module")
def smkp_predictor(smkp_relaxed_data):
    full = cached_dataset("smkp20_full", lambda: gen_examples(SMKP20, N_EXAMPLES, "full", seed=1))
    value = cached_network("smkp20_ip", full, SMKP20, 4, 64, "smkp")
    relaxed = cached_network("smkp20_lp", smkp_relaxed_data, SMKP20, 5, 96, "smkp")
    return NetworkPredictor(value, relaxed)


def paired_runs(params, exact_cfg, ml_cfg, seeds=EVAL_SEEDS):
    out = []
    for seed in seeds:
        p = gen_instance(params, seed)
        exact = solve(p, exact_cfg)
        ml = solve(p, ml_cfg)
        out.append((seed, exact, ml))
    return out


def gaps(runs):
    return np.array([100.0 * (ml.first_stage_objective - ex.first_stage_objective)
                     / abs(ex.first_stage_objective) for _, ex, ml in runs])


@pytest.fixture(scope="module")
def sslp10_runs(sslp10_predictor):
    t0 = time.monotonic()
    runs = paired_runs(SSLP10, SolveConfig(),
                       SolveConfig(mode="ml", mu=1.0, predictor=sslp10_predictor))
    return runs, time.monotonic() - t0


@pytest.fixture(scope="module")
def smkp20_runs(smkp_predictor):
    t0 = time.monotonic()
    runs = paired_runs(SMKP20, SolveConfig(is_alt=True),
                       SolveConfig(is_alt=True, mode="ml", mu=0.98, nu=0.95, predictor=smkp_predictor))
    return runs, time.monotonic() - t0


@pytest.fixture(scope="module")
def sslp50_runs(sslp50_implicit_predictor):
    return paired_runs(SSLP50, SolveConfig(),
                       SolveConfig(mode="ml", mu=1.0, predictor=sslp50_implicit_predictor))


def note(record_property, title, detail):
    record_property("criterion", title)
    record_property("detail", detail)


# ---------------------------------------------------------------- criteria

def test_exactness_oracle(record_property):
    title = "Exactness oracle: Std-L = Alt-L = extensive form on 50 instances per family, <= 10 min"
    record_property("criterion", title)
    t0 = time.monotonic()
    worst, n = 0.0, 0
    for params in (SSLP10, SMKP_SMALL):
        for seed in EVAL_SEEDS:
            p = gen_instance(params, seed)
            ef = solve_extensive(p)["first_stage_objective"]
            std = solve(p, SolveConfig()).first_stage_objective
            alt = solve(p, SolveConfig(is_alt=True)).first_stage_objective
            worst = max(worst, abs(std - ef), abs(alt - ef), abs(std - alt))
            n += 1
    minutes = (time.monotonic() - t0) / 60
    note(record_property, title, f"{n} instances, max |diff| {worst:.2e}, {minutes:.1f} min")
    assert worst <= 1e-6 and minutes <= 10


def test_perfect_predictor_equivalence(record_property):
    title = "Perfect-predictor equivalence: ML-Std-L/ML-Alt-L with oracle predictors, mu = nu = 1"
    record_property("criterion", title)
    worst, n = 0.0, 0
    for params in (SSLP10, SMKP_SMALL):
        for seed in EVAL_SEEDS:
            p = gen_instance(params, seed)
            for is_alt in (False, True):
                exact = solve(p, SolveConfig(is_alt=is_alt)).first_stage_objective
                ml = solve(p, SolveConfig(is_alt=is_alt, mode="ml", predictor=OraclePredictor()))
                worst = max(worst, abs(ml.first_stage_objective - exact))
                n += 1
    note(record_property, title, f"{n} paired solves, max |diff| {worst:.2e}")
    assert worst <= 1e-6


def test_cut_validity_sweep(record_property, monkeypatch):
    title = "Cut validity: every exact cut valid at all 2^n binary points on 20 instances (n <= 12)"
    record_property("criterion", title)
    cuts = []

    def recording(fn):
        def wrapper(*args, **kwargs):
            cut = fn(*args, **kwargs)
            cuts.append(cut)
            return cut
        return wrapper

    monkeypatch.setattr(lshaped, "make_integer_cut", recording(lshaped.make_integer_cut))
    monkeypatch.setattr(lshaped, "make_continuous_cut", recording(lshaped.make_continuous_cut))
    n_cuts, worst = 0, -np.inf
    for params in (SSLP10, SMKP_SMALL):
        for seed in EVAL_SEEDS[:10]:
            p = gen_instance(params, seed)
            cuts.clear()
            solve(p, SolveConfig())
            solve(p, SolveConfig(is_alt=True))
            pts = binary_points(p.n_x)
            Q = np.array([evaluate_Q(p, x) for x in pts])
            Qt = np.array([evaluate_Q_relaxed(p, x).Q_tilde for x in pts])
            for cut in cuts:
                bound = pts @ cut.coeff_x - cut.rhs
                ref = Q if cut.kind.startswith("integer") else Qt
                worst = max(worst, float(np.max(bound - ref)))
            n_cuts += len(cuts)
    note(record_property, title, f"{n_cuts} cuts, max violation {worst:.2e}")
    assert n_cuts > 0 and worst <= 1e-6


def test_trained_predictor_quality(record_property, sslp10_runs, smkp20_runs):
    title = "Trained predictors: ML-Std-L gap <= 2% (SSLP), ML-Alt-L gap <= 2% (SMKP), <= 30 min incl. training"
    record_property("criterion", title)
    (s_runs, s_time), (k_runs, k_time) = sslp10_runs, smkp20_runs
    g_sslp, g_smkp = gaps(s_runs), gaps(k_runs)
    total = (build_seconds("sslp10_full", "sslp10_ip", "smkp20_full", "smkp20_relaxed", "smkp20_ip", "smkp20_lp")
             + s_time + k_time) / 60
    failed = sum(ml.n_retries > 0 for _, _, ml in s_runs + k_runs)
    note(record_property, title,
         f"SSLP avg gap {g_sslp.mean():.3f}% (max {g_sslp.max():.2f}%), SMKP avg gap {g_smkp.mean():.3f}% "
         f"(max {g_smkp.max():.2f}%), {failed} runs needed retries, {total:.1f} min incl. recorded build")
    assert g_sslp.mean() <= 2.0 and g_smkp.mean() <= 2.0 and total <= 30
    assert np.all(g_sslp >= -1e-6) and np.all(g_smkp >= -1e-6)


def test_zero_exact_solves_in_ml_mode(record_property, sslp10_runs, smkp20_runs, sslp50_runs):
    title = "Zero exact subproblem solves in ml mode during tree search (every benched instance)"
    record_property("criterion", title)
    ml = [r[2] for r in sslp10_runs[0] + smkp20_runs[0] + sslp50_runs]
    bad = [r for r in ml if r.n_exact_integral_solves or r.n_exact_relaxed_solves]
    preds = sum(r.n_predictions for r in ml)
    note(record_property, title, f"{len(ml)} ml runs, {len(bad)} with exact solves, {preds} predictions")
    assert not bad and preds > 0


def test_implicit_aggregation(record_property, sslp50_runs):
    title = "Implicit aggregation: 20 points x 500 draws within 2 SE; implicit-trained predictor gap <= 5%"
    record_property("criterion", title)
    rng = np.random.default_rng(42)
    z = []
    for k in range(20):
        p = gen_instance(SSLP50, 5_000_000 + k)
        x = (rng.random(p.n_x) < 0.5).astype(float)
        vals = np.array([scenario_value(p, s, x) for s in range(p.n_scenarios)])
        full = float(p.probs @ vals)
        draws = vals[rng.integers(p.n_scenarios, size=500)]
        se = draws.std(ddof=1) / np.sqrt(500)
        z.append((draws.mean() - full) / se)
    z = np.array(z)
    pooled = abs(z.mean()) * np.sqrt(len(z))  # mean of 20 unit-variance z-scores
    outside = int(np.sum(np.abs(z) > 2))
    g = gaps(sslp50_runs)
    note(record_property, title,
         f"{20 - outside}/20 points within 2 SE, pooled |z| {pooled:.2f}, implicit predictor avg gap "
         f"{g.mean():.3f}% (max {g.max():.2f}%)")
    # 2-SE exceedances are expected at rate ~4.6%: allow the binomial 99% quantile (3 of 20)
    assert outside <= 3 and pooled <= 2
    assert g.mean() <= 5.0


def test_strong_duality_identity(record_property, smkp_relaxed_data):
    title = "Strong-duality identity Qt = E[phi](h - Tx) - E[1'psi] on every relaxed label (1e-6 rel.)"
    record_property("criterion", title)
    ds = smkp_relaxed_data
    m = ds.feature_len
    Qt, E_phi, E_psi = ds.labels[:, 0], ds.labels[:, 1:1 + m], ds.labels[:, -1]
    rebuilt = np.sum(E_phi * ds.features, axis=1) - E_psi
    rel = np.abs(rebuilt - Qt) / np.maximum(1.0, np.abs(Qt))
    note(record_property, title, f"{len(ds)} labels, max rel. error {rel.max():.2e}")
    assert rel.max() <= 1e-6


def test_chebyshev_bound(record_property, smkp20_runs, sslp10_runs):
    title = "Chebyshev bound = mean - 3 sd; below the true optimum in >= 90% of 200 simulated histories"
    record_property("criterion", title)
    rng = np.random.default_rng(7)
    h = rng.normal(100, 15, 20)
    formula_err = abs(chebyshev_lower_bound(h, 0.10) - (h.mean() - 3 * h.std(ddof=1)))
    rates = []
    for runs in (smkp20_runs[0], sslp10_runs[0]):
        pool = np.array([ex.first_stage_objective for _, ex, _ in runs])
        hits = 0
        for _ in range(200):
            idx = rng.choice(len(pool), 21, replace=False)
            hits += chebyshev_lower_bound(pool[idx[:20]], 0.10) <= pool[idx[20]]
        rates.append(hits / 200)
    note(record_property, title, f"formula error {formula_err:.1e}, coverage SMKP {rates[0]:.1%}, "
                                 f"SSLP {rates[1]:.1%}")
    assert formula_err <= 1e-12 * abs(h.mean()) and min(rates) >= 0.90


def test_gradient_check(record_property, smkp_predictor, smkp_relaxed_data):
    title = "Gradient check: weighted-L1 gradients vs central differences, 20 non-kink parameters, 1e-4"
    record_property("criterion", title)
    net = smkp_predictor.relaxed_net
    ds = smkp_relaxed_data.subset(np.arange(64))
    errors = gradient_fd_errors(net, ds.features, ds.labels, loss_and_grad, np.random.default_rng(3))
    note(record_property, title, f"{len(errors)} parameters of the trained 5x96 net, max rel. error {errors.max():.1e}")
    assert len(errors) == 20 and errors.max() <= 1e-4


def test_lp_solver_oracle(record_property):
    title = "LP solver oracle: 200 random LPs match vertex enumeration (objective and duals, 1e-7)"
    record_property("criterion", title)
    rng = np.random.default_rng(2024)
    worst, feasible = 0.0, 0
    for _ in range(200):
        c, A, sense, b, lb, ub = random_lp(rng)
        ref, _ = lp_vertex_min(c, A, sense, b, lb, ub)
        sol = solve_dense(c, A, sense, b, lb, ub)
        if ref is None:
            assert sol.status == "infeasible"
            continue
        feasible += 1
        y = sol.row_duals
        assert sol.ok and np.all(y[sense == GE] >= -1e-9) and np.all(y[sense == LE] <= 1e-9)
        best, _ = lp_dual_vertices(c, A, sense, b, lb, ub)
        scale = max(1.0, abs(ref))
        worst = max(worst, abs(sol.objective - ref) / scale,
                    abs(lp_dual_value(c, A, sense, b, lb, ub, sol.row_duals) - best) / scale)
    note(record_property, title, f"{feasible} feasible LPs, max error {worst:.1e}")
    assert worst <= 1e-7


def test_retry_protocol(record_property, smkp_predictor):
    title = "Retry protocol: predictor inflated by 10%, mu = 0.98 -> >= 1 retry, feasible at shift >= 0.7"
    record_property("criterion", title)
    pred = InflatedPredictor(smkp_predictor, 1.10)
    retries, finals = [], []
    for seed in RETRY_SEEDS:
        res = solve(gen_instance(SMKP20, seed),
                    SolveConfig(is_alt=True, mode="ml", mu=0.98, nu=0.95, predictor=pred))
        retries.append(res.n_retries)
        finals.append(min(res.mu, res.nu))
    note(record_property, title, f"{sum(r > 0 for r in retries)}/{len(retries)} instances retried, "
                                 f"all feasible, lowest final shift {min(finals):.4f}")
    assert sum(retries) >= 1 and min(finals) >= 0.7


def test_directional_timing(record_property, sslp50_runs):
    title = "Directional timing (c = 50): ML-Std-L median wall time < Std-L median wall time"
    record_property("criterion", title)
    t_exact = np.median([ex.wall_times["total"] for _, ex, _ in sslp50_runs])
    t_ml = np.median([ml.wall_times["total"] for _, _, ml in sslp50_runs])
    note(record_property, title, f"median {t_ml:.3f}s vs {t_exact:.3f}s over {len(sslp50_runs)} instances")
    assert t_ml < t_exact
