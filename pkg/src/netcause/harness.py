"""Experiment orchestration: data, splits, all variants over k and seeds, tables.

One job is a (k, seed index, variant) triple.  A job trains one model per
lambda of the grid (a single lambda-free model for variants without the
Wasserstein term) and writes ``result.json`` holding every candidate's
validation loss and metrics.  Aggregation then picks lambda per
(variant, k) by mean validation loss over seeds, so every table number can
be recomputed from the per-run files.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .balance import hsic
from .estimator import (EFFECT_PAIRS, LAMBDA_GRID, VARIANTS, EstimatorConfig, current_weights,
                        counterfactual_rmse, predict_effects, train, true_effects,
                        validation_loss)
from .graph import SPLITS, gcn_matrix, partition_three_way, read_edge_list
from .metrics import mean_sd, pehe
from .synth import GenConfig, NetworkDataset, generate_dataset, load_dataset, load_features_csv, \
    sample_features, small_world_graph

log = logging.getLogger(__name__)

SEED_ENV = "NETCAUSE_SEED"
EVAL_SPLITS = {"within": "train", "out": "test"}
HSIC_STAGES = ("raw", "reweighted", "reweighted+repre")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    source: str = "generate"            # "generate" or a dataset directory / features CSV
    edges: str = ""                     # edge list used with a features CSV source
    n_units: int = 2000
    mean_degree: int = 10
    rewire: float = 0.1
    feature_dim: int = 10
    noise_scale: float = 1.0
    ks: tuple = (0.5, 1.0, 1.5)
    variants: tuple = VARIANTS
    seeds: int = 5
    lambdas: tuple = LAMBDA_GRID
    fractions: tuple = (0.6, 0.2, 0.2)
    output_dir: str = "results"
    master_seed: int = 0
    epochs: int = 300
    select_every: int = 10
    alpha: float = 4.0
    ot_max_points: int = 256
    diag_every: int = 0
    jobs: int = 1

    def __post_init__(self):
        for name in ("ks", "variants", "lambdas", "fractions"):
            setattr(self, name, tuple(getattr(self, name)))

    def validate(self) -> "ExperimentConfig":
        if not self.variants or not self.ks or self.seeds < 1:
            raise ConfigError("need at least one variant, one k and one seed")
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ConfigError(f"unknown variants {sorted(bad)}")
        if abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) <= 0:
            raise ConfigError("split fractions must be positive and sum to 1")
        out = Path(self.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise ConfigError(f"output directory {out} is not writable")
        return self

    def with_env(self) -> "ExperimentConfig":
        """Apply the NETCAUSE_SEED override of the master seed."""
        if os.environ.get(SEED_ENV):
            return replace(self, master_seed=int(os.environ[SEED_ENV]))
        return self

    @classmethod
    def from_ini(cls, path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        if not parser.read(path, encoding="utf-8"):
            raise ConfigError(f"cannot read {path}")
        if "experiment" not in parser:
            raise ConfigError(f"{path}: missing [experiment] section")
        sec = parser["experiment"]
        kwargs = {}
        for f in fields(cls):
            if f.name not in sec:
                continue
            raw = sec[f.name].strip()
            default = f.default
            if isinstance(default, tuple):
                items = [s.strip() for s in raw.split(",") if s.strip()]
                conv = str if f.name == "variants" else float
                kwargs[f.name] = tuple(conv(s) for s in items)
            elif isinstance(default, bool):
                kwargs[f.name] = sec.getboolean(f.name)
            elif isinstance(default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(default, float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        unknown = set(sec) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        return cls(**kwargs)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser["experiment"] = {k: (", ".join(map(str, v)) if isinstance(v, tuple) else str(v))
                                for k, v in asdict(self).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


# ---------------------------------------------------------------------------
# seeds and data


def derived_seed(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence([master, *keys]).generate_state(1)[0])


def _base_inputs(cfg: ExperimentConfig, data_seed: int):
    """Graph and features; independent of k so k-comparisons are matched."""
    src = cfg.source
    if src == "generate":
        graph = small_world_graph(cfg.n_units, cfg.mean_degree, cfg.rewire, seed=data_seed)
        return graph, sample_features(cfg.n_units, cfg.feature_dim, data_seed)
    path = Path(src)
    if path.is_dir():
        ds = load_dataset(path)
        return ds.graph, ds.X
    X = load_features_csv(path)
    if not cfg.edges:
        raise ConfigError("a features CSV source needs an edge list")
    return read_edge_list(cfg.edges, n_units=X.shape[0]), X


def build_splits(cfg: ExperimentConfig, k: float, seed_index: int) -> dict:
    data_seed = derived_seed(cfg.master_seed, seed_index, 1)
    graph, X = _base_inputs(cfg, data_seed)
    gen = GenConfig(k=k, seed=data_seed, feature_dim=X.shape[1], noise_scale=cfg.noise_scale)
    ds = generate_dataset(graph, X, gen)
    part = partition_three_way(graph, cfg.fractions, seed=data_seed)
    splits = {}
    for name in SPLITS:
        sub = ds.subset(part.units(name))
        sub.meta["isolated_after_split"] = int(np.sum(sub.graph.degree == 0))
        sub.meta["cut_edges_dropped"] = int(part.cut_edges)
        splits[name] = sub
    return splits


# ---------------------------------------------------------------------------
# single job


def run_id(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def covariates(ds: NetworkDataset) -> np.ndarray:
    """Own features next to the neighbor mean on the split's own subgraph (0 if isolated)."""
    deg = ds.graph.degree
    nbr = np.zeros_like(ds.X)
    has = deg > 0
    nbr[has] = (ds.graph.adjacency() @ ds.X)[has] / deg[has, None]
    return np.hstack([ds.X, nbr])


def treatment_pairs(ds: NetworkDataset) -> np.ndarray:
    return np.column_stack([ds.t, ds.z])


def hsic_diagnostics(model, ds: NetworkDataset, variant: str) -> dict:
    """Dependence between covariates (or representation) and the treatment pair."""
    tz = treatment_pairs(ds)
    cov = covariates(ds)
    out = {"raw": hsic(cov, tz)}
    if variant in ("reweight", "both"):
        w = current_weights(model, ds)
        out["reweighted"] = hsic(cov, tz, w)
        if variant == "both":
            r = model.represent(model.aggregate(ds.X, gcn_matrix(ds.graph, isolated="zero")))
            out["reweighted+repre"] = hsic(r.value, tz, w)
    return out


def evaluate_model(model, splits: dict) -> dict:
    out = {}
    for label, split in EVAL_SPLITS.items():
        ds = splits[split]
        est, truth = predict_effects(model, ds), true_effects(ds)
        out[label] = {"pehe": {e: pehe(est[e], truth[e]) for e in EFFECT_PAIRS},
                      "rmse": counterfactual_rmse(model, ds),
                      "mean_effect": {e: float(np.mean(est[e])) for e in EFFECT_PAIRS}}
    return out


def _diag_callback(every, ds, rows):
    tz = treatment_pairs(ds)
    A = gcn_matrix(ds.graph, isolated="zero")

    def cb(epoch, model, rec):
        row = {"epoch": epoch, "factual_loss": rec["factual"], "wasserstein": rec["wasserstein"],
               "hsic_raw": "", "hsic_weighted": ""}
        if every and (epoch + 1) % every == 0:
            r = model.represent(model.aggregate(ds.X, A)).value
            row["hsic_raw"] = hsic(r, tz)
            row["hsic_weighted"] = hsic(r, tz, current_weights(model, ds, A))
        rows.append(row)

    return cb


def run_job(cfg: ExperimentConfig, k: float, seed_index: int, variant: str) -> dict:
    """Train every lambda candidate for one (k, seed, variant) and write result.json."""
    splits = build_splits(cfg, k, seed_index)
    train_seed = derived_seed(cfg.master_seed, seed_index, 2)
    base = EstimatorConfig(variant=variant, epochs=cfg.epochs, seed=train_seed,
                           select_every=cfg.select_every, alpha=cfg.alpha,
                           ot_max_points=cfg.ot_max_points)
    grid = cfg.lambdas if base.uses_ipm else (0.0,)
    job = {"k": k, "seed_index": seed_index, "variant": variant}
    out_dir = Path(cfg.output_dir) / "runs" / f"k{k:g}_s{seed_index}_{variant}"
    out_dir.mkdir(parents=True, exist_ok=True)
    candidates = {}
    for lam in grid:
        ecfg = replace(base, lam=lam)
        rows = []
        model, trace = train(splits["train"], ecfg, valid=splits["valid"],
                             callback=_diag_callback(cfg.diag_every, splits["train"], rows))
        cand = {"lambda": lam, "valid_loss": validation_loss(model, splits["valid"]),
                "best_epoch": trace.best_epoch, "metrics": evaluate_model(model, splits),
                "hsic": hsic_diagnostics(model, splits["train"], variant)}
        candidates[f"{lam:g}"] = cand
        _write_csv(out_dir / f"diagnostics_lam{lam:g}.csv",
                   ["epoch", "factual_loss", "wasserstein", "hsic_raw", "hsic_weighted"], rows)
        model.save(out_dir / f"checkpoint_lam{lam:g}.json")
    result = {
        "job": job,
        "estimator": asdict(base),
        "generator": splits["train"].meta.get("config", {}),
        "split_meta": {s: {"n_units": d.n_units,
                           "isolated_after_split": d.meta["isolated_after_split"]}
                       for s, d in splits.items()},
        "cut_edges_dropped": splits["train"].meta["cut_edges_dropped"],
        "candidates": candidates,
    }
    result["run_id"] = run_id(result)
    (out_dir / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True),
                                         encoding="utf-8")
    return result


def _job_entry(args):
    cfg, k, s, v = args
    try:
        return {"ok": True, "result": run_job(cfg, k, s, v)}
    except Exception as exc:  # recorded as a missing cell, the sweep continues
        log.warning("job k=%s seed=%s variant=%s failed: %s", k, s, v, exc)
        return {"ok": False, "k": k, "seed_index": s, "variant": v,
                "reason": type(exc).__name__, "message": str(exc),
                "traceback": traceback.format_exc(limit=3)}


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class ResultsTable:
    pehe_rows: list = field(default_factory=list)
    rmse_rows: list = field(default_factory=list)
    hsic_rows: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    selected_lambda: dict = field(default_factory=dict)

    def pehe(self, k, split, effect, variant, stat="mean") -> float:
        for r in self.pehe_rows:
            if (r["k"], r["split"], r["effect"], r["variant"]) == (k, split, effect, variant):
                return r[stat]
        raise KeyError((k, split, effect, variant))

    def rmse(self, k, split, variant, stat="mean") -> float:
        for r in self.rmse_rows:
            if (r["k"], r["split"], r["variant"]) == (k, split, variant):
                return r[stat]
        raise KeyError((k, split, variant))


def aggregate(results: list, missing: list | None = None) -> ResultsTable:
    """Tables from per-run results; lambda chosen per (variant, k) by mean validation loss."""
    table = ResultsTable(missing=list(missing or []))
    groups: dict = {}
    for res in results:
        j = res["job"]
        groups.setdefault((j["k"], j["variant"]), []).append(res)
    for (k, variant), runs in sorted(groups.items()):
        lams = sorted(runs[0]["candidates"], key=float)
        score = {lam: np.mean([r["candidates"][lam]["valid_loss"] for r in runs]) for lam in lams}
        lam = min(lams, key=lambda x: (score[x], float(x)))
        table.selected_lambda[(k, variant)] = float(lam)
        chosen = [r["candidates"][lam] for r in sorted(runs, key=lambda r: r["job"]["seed_index"])]
        for split in EVAL_SPLITS:
            for effect in EFFECT_PAIRS:
                vals = [c["metrics"][split]["pehe"][effect] for c in chosen]
                m, sd = mean_sd(vals)
                table.pehe_rows.append({"k": k, "split": split, "effect": effect,
                                        "variant": variant, "lambda": float(lam), "mean": m,
                                        "sd": sd, "median": float(np.median(vals)),
                                        "n_seeds": len(vals)})
            vals = [c["metrics"][split]["rmse"] for c in chosen]
            m, sd = mean_sd(vals)
            table.rmse_rows.append({"k": k, "split": split, "variant": variant,
                                    "lambda": float(lam), "mean": m, "sd": sd,
                                    "median": float(np.median(vals)), "n_seeds": len(vals)})
        for stage in HSIC_STAGES:
            vals = [c["hsic"][stage] for c in chosen if stage in c["hsic"]]
            if vals and (stage != "raw" or variant in ("reweight", "both")):
                m, sd = mean_sd(vals)
                table.hsic_rows.append({"k": k, "variant": variant, "stage": stage, "mean": m,
                                        "sd": sd, "median": float(np.median(vals)),
                                        "n_seeds": len(vals)})
    return table


def _fmt(v):
    return format(v, ".10g") if isinstance(v, float) else str(v)


def _write_csv(path, columns, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


PEHE_COLUMNS = ["k", "split", "effect", "variant", "lambda", "mean", "sd", "median", "n_seeds"]
RMSE_COLUMNS = ["k", "split", "variant", "lambda", "mean", "sd", "median", "n_seeds"]
MISSING_COLUMNS = ["k", "seed_index", "variant", "reason", "message"]


def write_tables(table: ResultsTable, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return {
        "pehe": _write_csv(out / "pehe_table.csv", PEHE_COLUMNS, table.pehe_rows),
        "rmse": _write_csv(out / "rmse_table.csv", RMSE_COLUMNS, table.rmse_rows),
        "missing": _write_csv(out / "missing_cells.csv", MISSING_COLUMNS, table.missing),
    }


def emit_plot_data(table: ResultsTable, out_dir, variants=None) -> dict:
    """Long-format CSVs for the RMSE-versus-k and HSIC figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keep = set(VARIANTS if variants is None else variants)
    rmse_rows = [r for r in table.rmse_rows if r["variant"] in keep]
    hsic_rows = [{"stage": r["stage"], "k": r["k"], "variant": r["variant"], "mean": r["mean"],
                  "sd": r["sd"], "median": r["median"]}
                 for r in table.hsic_rows if r["variant"] in keep]
    return {
        "rmse": _write_csv(out / "fig_rmse_vs_k.csv", ["k", "split", "variant", "mean", "sd"],
                           rmse_rows),
        "hsic": _write_csv(out / "fig_hsic.csv", ["stage", "k", "variant", "mean", "sd", "median"],
                           hsic_rows),
    }


def load_results(out_dir) -> list:
    return [json.loads(p.read_text(encoding="utf-8"))
            for p in sorted(Path(out_dir).glob("runs/*/result.json"))]


def run_experiment(cfg: ExperimentConfig) -> ResultsTable:
    """Every (k, seed, variant) job, then lambda selection and tables on disk."""
    cfg = cfg.with_env().validate()
    out = Path(cfg.output_dir)
    (out / "experiment.ini").write_text(cfg.to_ini(), encoding="utf-8")
    tasks = [(cfg, k, s, v) for k in cfg.ks for s in range(cfg.seeds) for v in cfg.variants]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(_job_entry, tasks))
    else:
        outcomes = [_job_entry(t) for t in tasks]
    results = [o["result"] for o in outcomes if o["ok"]]
    missing = [{c: o[c] for c in MISSING_COLUMNS} for o in outcomes if not o["ok"]]
    table = aggregate(results, missing)
    write_tables(table, out)
    emit_plot_data(table, out)
    return table
