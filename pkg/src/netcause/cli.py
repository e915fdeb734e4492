"""Command-line entry point: generate, train, evaluate, theory-check, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import harness
from .engine.checkpoint import load_checkpoint, restore, save_checkpoint
from .estimator import VARIANTS, EstimatorConfig, EstimatorModel, train
from .graph import SPLITS, Partition, partition_three_way, read_edge_list
from .synth import GenConfig, generate_dataset, load_dataset, load_features_csv, save_dataset, \
    sample_features, small_world_graph
from .theory import audit, write_theory_report


def _master_seed(value: int) -> int:
    env = os.environ.get(harness.SEED_ENV)
    return int(env) if env else value


def _fractions(text: str) -> tuple:
    parts = tuple(float(v) for v in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("need three comma-separated fractions")
    return parts


def _write_partition(part: Partition, path: Path) -> None:
    lines = ["unit,split"] + [f"{i},{SPLITS[a]}" for i, a in enumerate(part.assignment)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_partition(path: Path) -> dict:
    rows = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    return {s: np.sort(rows["unit"][rows["split"] == s]).astype(np.int64) for s in SPLITS}


def _splits(data_dir: Path, fractions, seed) -> dict:
    ds = load_dataset(data_dir)
    part_file = data_dir / "partition.csv"
    if part_file.exists():
        units = _read_partition(part_file)
    else:
        part = partition_three_way(ds.graph, fractions, seed=seed)
        units = {s: part.units(s) for s in SPLITS}
    return {s: ds.subset(u) for s, u in units.items()}


def cmd_generate(args) -> int:
    seed = _master_seed(args.seed)
    if args.features:
        X = load_features_csv(args.features, args.feature_dim)
        if not args.edges:
            raise SystemExit("--features needs --edges")
        graph = read_edge_list(args.edges, n_units=X.shape[0])
    else:
        graph = small_world_graph(args.n_units, args.mean_degree, args.rewire, seed=seed)
        X = sample_features(args.n_units, args.feature_dim or 10, seed)
    cfg = GenConfig(k=args.k, seed=seed, feature_dim=X.shape[1], noise_scale=args.noise_scale)
    ds = generate_dataset(graph, X, cfg)
    out = save_dataset(ds, args.out)
    _write_partition(partition_three_way(graph, args.fractions, seed=seed), out / "partition.csv")
    print(f"wrote {ds.n_units} units to {out}")
    return 0


def cmd_train(args) -> int:
    seed = _master_seed(args.seed)
    splits = _splits(Path(args.data), args.fractions, seed)
    cfg = EstimatorConfig(variant=args.variant, lam=args.lam, epochs=args.epochs, seed=seed,
                          alpha=args.alpha, select_every=args.select_every)
    rows = []
    model, trace = train(splits["train"], cfg, valid=splits["valid"],
                         callback=harness._diag_callback(args.diag_every, splits["train"], rows))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "checkpoint.json")
    if model.e_model is not None:
        save_checkpoint({**{f"e/{k}": v for k, v in model.e_model.parameters().items()},
                         **{f"phi/{k}": v for k, v in model.phi_model.parameters().items()}},
                        out / "propensity.json")
    harness._write_csv(out / "diagnostics.csv",
                       ["epoch", "factual_loss", "wasserstein", "hsic_raw", "hsic_weighted"], rows)
    result = {"estimator": asdict(cfg), "best_epoch": trace.best_epoch,
              "final": trace.records[-1], "data": str(args.data)}
    if splits["train"].oracle is not None:
        result["metrics"] = harness.evaluate_model(model, splits)
    result["run_id"] = harness.run_id(result)
    (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True),
                                     encoding="utf-8")
    print(json.dumps(result.get("metrics", result["final"]), indent=2, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    meta = json.loads((run / "result.json").read_text(encoding="utf-8"))
    cfg = EstimatorConfig(**meta["estimator"])
    splits = _splits(Path(args.data), args.fractions, cfg.seed)
    model = EstimatorModel(splits["train"].X.shape[1], cfg)
    restore(model.parameters(), load_checkpoint(run / "checkpoint.json"))
    metrics = harness.evaluate_model(model, splits)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(metrics, indent=2, sort_keys=True), encoding="utf-8")
    return 0


def cmd_theory(args) -> int:
    reports = audit(args.scenarios, seed=_master_seed(args.seed))
    path = write_theory_report(reports, args.out)
    bad = sum(not r.passed for r in reports)
    print(f"{len(reports)} checks, {bad} violations -> {path}")
    return 1 if bad else 0


def cmd_report(args) -> int:
    if args.results:
        results = harness.load_results(args.results)
        if not results:
            raise SystemExit(f"no runs/*/result.json under {args.results}")
        table = harness.aggregate(results)
        harness.write_tables(table, args.results)
        harness.emit_plot_data(table, args.results)
        out = args.results
    else:
        cfg = harness.ExperimentConfig.from_ini(args.config) if args.config \
            else harness.ExperimentConfig()
        overrides = {k: v for k, v in (("output_dir", args.out), ("jobs", args.jobs),
                                       ("seeds", args.seeds), ("epochs", args.epochs),
                                       ("n_units", args.n_units)) if v is not None}
        cfg = replace(cfg, **overrides)
        table = harness.run_experiment(cfg)
        out = cfg.output_dir
    print(f"tables written to {out}; {len(table.missing)} missing cells")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netcause", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate treatments and outcomes on a network")
    g.add_argument("--out", required=True, help="dataset directory to create")
    g.add_argument("--n-units", type=int, default=2000)
    g.add_argument("--mean-degree", type=int, default=10)
    g.add_argument("--rewire", type=float, default=0.1)
    g.add_argument("--feature-dim", type=int, default=None)
    g.add_argument("--features", help="feature CSV instead of sampled features")
    g.add_argument("--edges", help="edge list to pair with --features")
    g.add_argument("--k", type=float, default=1.0, help="interference degree")
    g.add_argument("--noise-scale", type=float, default=1.0)
    g.add_argument("--fractions", type=_fractions, default=(0.6, 0.2, 0.2))
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one estimator variant on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory for checkpoint and logs")
    t.add_argument("--variant", choices=VARIANTS, default="both")
    t.add_argument("--lam", type=float, default=0.1)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--alpha", type=float, default=EstimatorConfig.alpha)
    t.add_argument("--select-every", type=int, default=10,
                   help="validation checkpoint interval (0 keeps the last epoch)")
    t.add_argument("--diag-every", type=int, default=0, help="HSIC diagnostic interval")
    t.add_argument("--fractions", type=_fractions, default=(0.6, 0.2, 0.2))
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="effect errors of a trained run")
    e.add_argument("--data", required=True)
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--fractions", type=_fractions, default=(0.6, 0.2, 0.2))
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    th = sub.add_parser("theory-check", help="audit the bounds on random discrete scenarios")
    th.add_argument("--scenarios", type=int, default=100)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out", default="theory-report.json")
    th.set_defaults(func=cmd_theory)

    r = sub.add_parser("report", help="run a full experiment grid, or re-aggregate results")
    r.add_argument("--config", help="INI file with an [experiment] section")
    r.add_argument("--results", help="re-aggregate an existing output directory")
    r.add_argument("--out")
    r.add_argument("--jobs", type=int)
    r.add_argument("--seeds", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--n-units", type=int)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
