"""``mlshaped`` command line: generate, train, solve, bench, report."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import bench
from .families import gen_examples, gen_examples_relaxed, gen_instance, split_indices
from .model import load_problem, save_problem

DEFAULT_TRAIN = {"hidden_layers": 4, "units": 64, "relaxed_hidden_layers": 5, "relaxed_units": 96,
                 "patience": 150, "max_epochs": 2000, "seed": 0}


def _config(args) -> bench.ExperimentConfig:
    overrides = {"time_limit": getattr(args, "time_limit", None),
                 "baseline": getattr(args, "baseline", None)}
    if args.config:
        cfg = bench.load_config(args.config, **overrides)
    else:
        cfg = bench.default_config(args.family)
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
    if args.seed is not None:
        cfg.data_seed = args.seed
    return cfg


def _ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def cmd_generate(args) -> int:
    cfg = _config(args)
    if cfg.examples < 1:
        raise SystemExit("examples must be at least 1")
    out = _ensure_dir(args.out)
    inst_dir = _ensure_dir(os.path.join(out, "instances"))
    files = []
    for seed in cfg.eval_seeds():
        path = os.path.join(inst_dir, f"instance_{seed}.json")
        save_problem(gen_instance(cfg.params, seed), path)
        files.append(path)
    data_dir = _ensure_dir(os.path.join(out, "datasets"))
    timings = {}
    plans = [("value", lambda: gen_examples(cfg.params, cfg.examples, cfg.labeling, cfg.data_seed, args.jobs))]
    if cfg.relaxed_examples:
        plans.append(("relaxed", lambda: gen_examples_relaxed(cfg.params, cfg.relaxed_examples,
                                                              cfg.data_seed + 1, args.jobs)))
    from .surrogate import save_dataset

    for name, make in plans:
        t0 = time.monotonic()
        ds = make()
        timings[name] = time.monotonic() - t0
        path = os.path.join(data_dir, f"{name}.csv")
        save_dataset(ds, path)
        files.append(path)
        tr, va, te = split_indices(len(ds), cfg.data_seed)
        print(f"{name}: {len(ds)} examples (train {len(tr)}, validation {len(va)}, test {len(te)}) "
              f"in {timings[name]:.1f}s")
    bench.write_manifest(out, {"config": asdict(cfg), "eval_seeds": cfg.eval_seeds(),
                               "data_seed": cfg.data_seed}, files)
    print(f"wrote {len(files)} files to {out}")
    return 0


def cmd_train(args) -> int:
    from .families import binary_feature_mask
    from .surrogate import (NetworkSpec, TrainConfig, abs_relative_error, load_dataset,
                            normalized_l1_error, save_network, train)

    cfg = _config(args)
    opts = {**DEFAULT_TRAIN, **cfg.train}
    data_dir = os.path.join(args.data or args.out, "datasets")
    model_dir = _ensure_dir(os.path.join(args.out, "models"))
    family = cfg.family["family"]
    rows = []
    for name, label, layers, units in (("value", "IP", opts["hidden_layers"], opts["units"]),
                                       ("relaxed", "LP", opts["relaxed_hidden_layers"], opts["relaxed_units"])):
        path = os.path.join(data_dir, f"{name}.csv")
        if not os.path.exists(path):
            if name == "value":
                raise SystemExit(f"missing dataset {path}; run generate first")
            continue
        ds = load_dataset(path)
        tr, va, te = split_indices(len(ds), cfg.data_seed)
        spec = NetworkSpec(ds.feature_len, ds.label_len, layers, units)
        tc = TrainConfig(patience=opts["patience"], max_epochs=opts["max_epochs"], seed=opts["seed"])
        t0 = time.monotonic()
        net = train(ds.subset(tr), ds.subset(va), spec, tc, binary_feature_mask(cfg.params), family)
        elapsed = time.monotonic() - t0
        save_network(net, os.path.join(model_dir, f"{family}_{label.lower()}.json"))
        test = ds.subset(te)
        rel = abs_relative_error(net, test)
        norm = normalized_l1_error(net, test)
        for k in range(ds.label_len):
            rows.append({"family": family, "label": label, "output": k, "hidden_layers": layers,
                         "units": units, "examples": len(ds), "abs_rel_error_pct": float(rel[k]),
                         "normalized_l1_error_pct": float(norm[k]),
                         "best_epoch": int(net.history.get("best_epoch", -1)),
                         "train_seconds": elapsed})
        print(f"{family} {label}: {layers}x{units}, test abs. rel. error {np.round(rel, 3).tolist()} %, "
              f"normalized L1 {np.round(norm, 3).tolist()} %, {elapsed:.1f}s")
    report = os.path.join(args.out, "train_report.csv")
    with open(report, "w") as fh:
        cols = list(rows[0])
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")
    print(f"wrote {report}")
    return 0


def _model_paths(cfg, args):
    model_dir = os.path.join(args.models or args.out, "models")
    family = cfg.family["family"]
    for attr, label in (("value_model", "ip"), ("relaxed_model", "lp")):
        if getattr(cfg, attr) is None:
            path = os.path.join(model_dir, f"{family}_{label}.json")
            if os.path.exists(path):
                setattr(cfg, attr, path)


def cmd_solve(args) -> int:
    cfg = _config(args)
    _model_paths(cfg, args)
    problem = load_problem(args.instance)
    needs = args.method.removeprefix("2P-").startswith("ML-")
    predictor = bench.load_predictor(cfg.value_model, cfg.relaxed_model) if needs else None
    history = bench.exact_history(cfg) if args.method.endswith("+B") else None
    rec = bench.run_method(problem, args.method, cfg, predictor, history)
    text = json.dumps(rec, sort_keys=True)
    if args.out and args.out != "-":
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    _model_paths(cfg, args)
    out = _ensure_dir(args.out)

    def progress(recs):
        parts = [f"{r['method']}={'ERR' if 'error' in r else format(r['first_stage_objective'], '.6g')}"
                 for r in recs]
        print(f"seed {recs[0]['seed']}: " + " ".join(parts), flush=True)

    records = bench.run_bench(cfg, args.jobs, progress)
    rec_path = os.path.join(out, "records.jsonl")
    bench.write_records(records, rec_path)
    _write_reports(records, cfg.baseline, out)
    return 0


def _write_reports(records, baseline, out):
    rows = bench.aggregate(records, baseline)
    csv_path = os.path.join(out, "report.csv")
    bench.write_report_csv(rows, csv_path)
    text = bench.render_text(rows, f"baseline: {baseline}")
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(text)
    print(text)


def cmd_report(args) -> int:
    records = []
    for path in args.inputs:
        if not os.path.exists(path):
            raise SystemExit(f"missing input {path}")
        records.extend(bench.read_records(path))
    _write_reports(records, args.baseline or "Alt-L", _ensure_dir(args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlshaped", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--family", choices=["sslp", "smkp"], default="sslp",
                        help="built-in desk config when --config is absent")
        sp.add_argument("--seed", type=int, help="data generation seed")
        sp.add_argument("--out", default=out_default)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--time-limit", type=float, dest="time_limit")
        sp.add_argument("--baseline", choices=bench.METHODS)

    g = sub.add_parser("generate", help="write evaluation instances and training datasets")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train predictors on generated datasets")
    common(t)
    t.add_argument("--data", help="directory holding datasets/ (defaults to --out)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="solve one instance file")
    common(s, out_default="-")
    s.add_argument("instance")
    s.add_argument("--method", choices=bench.METHODS, default="Alt-L")
    s.add_argument("--models", help="directory holding models/")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="run all configured methods on fresh instances")
    common(b)
    b.add_argument("--models", help="directory holding models/ (defaults to --out)")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="aggregate record files into CSV and text tables")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out", default="runs")
    r.add_argument("--baseline", choices=bench.METHODS)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"mlshaped {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
