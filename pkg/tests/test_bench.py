import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlshaped import bench
from mlshaped.bench import (CSV_COLUMNS, ExperimentConfig, ReportRow, aggregate, quantiles,
                            read_records, read_report_csv, render_text, run_instance, stderr,
                            write_records, write_report_csv)
from mlshaped.cli import main
from mlshaped.families import SMKPParams, SSLPParams, params_to_dict
from mlshaped.surrogate import Dataset, load_dataset, save_dataset

TINY_SSLP = params_to_dict(SSLPParams(a=3, b=4, c=3, revenue_range=(15, 60)))


def synthetic_records():
    # method A: times 1..5; method B: times 2, 4, 6, 8, 10
    recs = []
    for s in range(5):
        recs.append({"method": "Alt-L", "seed": s, "first_stage_objective": 10.0 + s,
                     "wall_times": {"total": float(s + 1)}, "gap_vs_oracle": 0.0, "n_retries": 0})
        recs.append({"method": "ML-Alt-L", "seed": s, "first_stage_objective": 11.0 + s,
                     "wall_times": {"total": 2.0 * (s + 1)}, "gap_vs_oracle": 1.0, "n_retries": 0})
    return recs


class TestStatistics:
    def test_median_of_1_to_100(self):
        assert quantiles(np.arange(1, 101), (0.5,))[0] == 50.5

    def test_quantile_endpoints(self):
        q = quantiles([3.0, 1.0, 2.0], (0.0, 0.5, 1.0))
        np.testing.assert_array_equal(q, [1.0, 2.0, 3.0])

    def test_empty_and_single(self):
        assert all(math.isnan(v) for v in quantiles([]))
        assert math.isnan(stderr([1.0]))

    @settings(max_examples=50)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60))
    def test_quantiles_ordered(self, values):
        q05, q50, q95 = quantiles(values)
        assert q05 <= q50 <= q95


class TestAggregate:
    def test_hand_values(self):
        rows = {r.metric: r for r in aggregate(synthetic_records(), "Alt-L", ["time", "objective", "gap"])}
        t = rows["ML-Alt-L:time"]
        assert t.avg == pytest.approx(6.0)
        assert t.stderr == pytest.approx(np.std([2, 4, 6, 8, 10], ddof=1) / math.sqrt(5))
        assert t.q50 == pytest.approx(6.0)
        assert t.ratio_avg == pytest.approx(200.0)
        assert t.ratio_q05 == pytest.approx(200.0) and t.ratio_q95 == pytest.approx(200.0)
        o = rows["ML-Alt-L:objective"]
        expect = np.mean([100 * (11 + s) / (10 + s) for s in range(5)])
        assert o.ratio_avg == pytest.approx(expect)
        assert math.isnan(rows["ML-Alt-L:gap"].ratio_avg)

    def test_self_ratio_is_100(self):
        rows = aggregate(synthetic_records(), "Alt-L", ["time", "objective"])
        for r in rows:
            if r.metric.startswith("Alt-L:"):
                assert r.ratio_q05 == r.ratio_q50 == r.ratio_q95 == r.ratio_avg == 100.0

    def test_failures_counted_and_excluded(self):
        recs = synthetic_records()
        recs[3] = {"method": "ML-Alt-L", "seed": 1, "error": "NoSolutionError: x"}
        rows = {r.metric: r for r in aggregate(recs, "Alt-L", ["time"])}
        assert rows["ML-Alt-L:time"].failures == 1 and rows["ML-Alt-L:time"].n == 4
        assert "1 failed instance(s) excluded" in render_text(list(rows.values()))

    def test_zero_baseline_skipped(self):
        recs = synthetic_records()
        recs[0]["wall_times"]["total"] = 0.0
        rows = {r.metric: r for r in aggregate(recs, "Alt-L", ["time"])}
        assert rows["ML-Alt-L:time"].ratio_avg == pytest.approx(200.0)


class TestFiles:
    def test_empty_metric_set_gives_header_only_csv(self, tmp_path):
        path = tmp_path / "r.csv"
        write_report_csv(aggregate(synthetic_records(), "Alt-L", []), path)
        assert path.read_text().strip() == ",".join(CSV_COLUMNS)

    def test_csv_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = [ReportRow(f"m{k}", *rng.normal(size=9) / 3.0) for k in range(4)]
        rows.append(ReportRow("nan-ratios", 1.0, 2.0, 3.0, 2.0, 0.5))
        path = tmp_path / "r.csv"
        write_report_csv(rows, path)
        back = read_report_csv(path)
        for a, b in zip(rows, back):
            assert a.metric == b.metric
            for c in CSV_COLUMNS[1:]:
                va, vb = getattr(a, c), getattr(b, c)
                assert (math.isnan(va) and math.isnan(vb)) or va == vb

    def test_bad_header(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("a,b\n")
        with pytest.raises(ValueError):
            read_report_csv(path)

    def test_records_round_trip(self, tmp_path):
        path = tmp_path / "rec.jsonl"
        write_records(synthetic_records(), path)
        assert read_records(path) == synthetic_records()


class TestConfig:
    def test_zero_instances_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(TINY_SSLP, instances=0)

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(TINY_SSLP, methods=["Magic-L"])

    def test_history_seeds_disjoint(self):
        with pytest.raises(ValueError):
            ExperimentConfig(TINY_SSLP, methods=["2P-ML-Alt-L+B"], instance_seed=5, history_seed=10,
                             instances=20)
        cfg = ExperimentConfig(TINY_SSLP, methods=["2P-ML-Alt-L+B"])
        assert not set(cfg.eval_seeds()) & set(cfg.history_seeds())

    def test_defaults(self):
        assert bench.default_config("sslp").baseline == "Std-L"
        smkp = bench.default_config("smkp")
        assert (smkp.mu, smkp.nu, smkp.baseline) == (0.98, 0.95, "Alt-L")


class TestRunInstance:
    def test_exact_methods_have_zero_gap(self):
        cfg = ExperimentConfig(TINY_SSLP, instances=3, methods=["Std-L", "Alt-L", "EF"])
        for seed in cfg.eval_seeds():
            for rec in run_instance(cfg, seed):
                assert abs(rec["gap_vs_oracle"]) <= 1e-6

    def test_oracle_predictor_records(self):
        from mlshaped.lshaped import OraclePredictor
        cfg = ExperimentConfig(params_to_dict(SMKPParams(n1=6, m1=2, n2=6, m=3, c=3)), instances=2,
                               methods=["Alt-L", "ML-Alt-L", "2P-ML-Alt-L"])
        recs = run_instance(cfg, cfg.instance_seed, OraclePredictor())
        by = {r["method"]: r for r in recs}
        assert by["ML-Alt-L"]["n_exact_subproblem_solves"] == 0
        assert by["ML-Alt-L"]["n_predictions"] > 0
        assert abs(by["2P-ML-Alt-L"]["gap_vs_oracle"]) <= 1e-6


class TestCli:
    def write_config(self, tmp_path, **extra):
        cfg = {"family": TINY_SSLP, "instances": 2, "methods": ["Std-L", "EF"], "baseline": "Std-L",
               "examples": 30, **extra}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    def test_generate_is_deterministic(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        ma = (tmp_path / "a" / "manifest.json").read_text()
        mb = (tmp_path / "b" / "manifest.json").read_text()
        assert ma == mb
        ds = load_dataset(tmp_path / "a" / "datasets" / "value.csv")
        assert len(ds) == 30
        assert "train 19, validation 5, test 6" in capsys.readouterr().out

    def test_zero_count_rejected(self, tmp_path):
        cfg = self.write_config(tmp_path, instances=0)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 2

    def test_train_constant_labels(self, tmp_path):
        cfg = self.write_config(tmp_path, train={"hidden_layers": 1, "units": 4, "max_epochs": 1500,
                                                 "patience": 1500})
        X = np.random.default_rng(0).uniform(0, 1, (200, 6))
        X[:, 3:] = X[:, 3:] > 0.5
        (tmp_path / "datasets").mkdir()
        save_dataset(Dataset(X, np.full(200, 7.0)), tmp_path / "datasets" / "value.csv")
        assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "train_report.csv").read_text().splitlines()
        header = lines[0].split(",")
        row = dict(zip(header, lines[1].split(",")))
        assert row["label"] == "IP" and row["family"] == "sslp"
        assert float(row["abs_rel_error_pct"]) <= 1.0
        first = row["abs_rel_error_pct"]
        assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
        again = dict(zip(header, (tmp_path / "train_report.csv").read_text().splitlines()[1].split(",")))
        assert again["abs_rel_error_pct"] == first

    def test_bench_report_and_solve(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        out = tmp_path / "bench"
        assert main(["bench", "--config", cfg, "--out", str(out)]) == 0
        recs = read_records(out / "records.jsonl")
        assert len(recs) == 4
        rows = {r.metric: r for r in read_report_csv(out / "report.csv")}
        assert rows["Std-L:time"].ratio_avg == 100.0
        assert abs(rows["Std-L:gap"].avg) <= 1e-6
        assert main(["report", str(out / "records.jsonl"), "--out", str(tmp_path / "rep"),
                     "--baseline", "Std-L"]) == 0
        assert (tmp_path / "rep" / "report.csv").read_text() == (out / "report.csv").read_text()
        main(["generate", "--config", cfg, "--out", str(tmp_path / "g")])
        inst = next((tmp_path / "g" / "instances").iterdir())
        capsys.readouterr()
        assert main(["solve", str(inst), "--config", cfg, "--method", "Alt-L"]) == 0
        rec = json.loads(capsys.readouterr().out)
        assert rec["method"] == "Alt-L"

    def test_report_missing_input(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["report", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)])
