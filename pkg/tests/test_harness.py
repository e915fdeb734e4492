import csv

import numpy as np
import pytest

from netcause.harness import (ConfigError, ExperimentConfig, aggregate,
                              build_splits, derived_seed, emit_plot_data, load_results,
                              run_experiment)


def _small(tmp_path, name="out", **kw):
    base = dict(n_units=300, mean_degree=6, ks=(1.0,), variants=("reweight",), seeds=1,
                epochs=20, select_every=5, output_dir=str(tmp_path / name))
    base.update(kw)
    return ExperimentConfig(**base)


def _read(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_smoke_writes_every_file(tmp_path):
    cfg = _small(tmp_path)
    table = run_experiment(cfg)
    out = tmp_path / "out"
    for name in ("pehe_table.csv", "rmse_table.csv", "missing_cells.csv", "fig_rmse_vs_k.csv",
                 "fig_hsic.csv", "experiment.ini"):
        assert (out / name).exists(), name
    run_dir = out / "runs" / "k1_s0_reweight"
    assert (run_dir / "result.json").exists()
    assert (run_dir / "diagnostics_lam0.csv").exists()
    assert (run_dir / "checkpoint_lam0.json").exists()
    assert not table.missing
    # 2 splits x 3 effects, every sd non-negative
    assert len(table.pehe_rows) == 6
    assert all(r["sd"] >= 0 for r in table.pehe_rows)
    stages = {r["stage"] for r in _read(out / "fig_hsic.csv")}
    assert stages == {"raw", "reweighted"}
    assert list(_read(out / "fig_rmse_vs_k.csv")[0]) == ["k", "split", "variant", "mean", "sd"]


def test_rerun_is_byte_identical(tmp_path):
    a = _small(tmp_path, "a", variants=("both",), lambdas=(0.1,), epochs=10)
    b = _small(tmp_path, "b", variants=("both",), lambdas=(0.1,), epochs=10)
    run_experiment(a)
    run_experiment(b)
    for name in ("pehe_table.csv", "rmse_table.csv", "fig_hsic.csv", "fig_rmse_vs_k.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_tables_recomputed_from_results(tmp_path):
    cfg = _small(tmp_path, variants=("none",), seeds=2, epochs=10)
    table = run_experiment(cfg)
    runs = load_results(cfg.output_dir)
    assert len(runs) == 2
    for split in ("within", "out"):
        vals = [r["candidates"]["0"]["metrics"][split]["pehe"]["total"] for r in runs]
        assert table.pehe(1.0, split, "total", "none") == pytest.approx(np.mean(vals), rel=1e-12)
        assert table.pehe(1.0, split, "total", "none", "sd") == \
            pytest.approx(np.std(vals, ddof=1), rel=1e-12)
    again = aggregate(runs)
    assert again.pehe_rows == table.pehe_rows


def _fake_result(k, seed, variant, cands):
    metrics = lambda v: {s: {"pehe": {e: v for e in ("main", "spillover", "total")}, "rmse": v,
                             "mean_effect": {}} for s in ("within", "out")}
    return {"job": {"k": k, "seed_index": seed, "variant": variant},
            "candidates": {lam: {"valid_loss": vl, "metrics": metrics(m), "hsic": {"raw": 1.0}}
                           for lam, (vl, m) in cands.items()}}


def test_lambda_selected_by_mean_validation_loss():
    runs = [_fake_result(0.5, 0, "repre", {"0.1": (1.0, 10.0), "0.5": (3.0, 20.0)}),
            _fake_result(0.5, 1, "repre", {"0.1": (4.0, 30.0), "0.5": (1.0, 40.0)})]
    table = aggregate(runs)
    # mean validation: 2.5 for 0.1, 2.0 for 0.5
    assert table.selected_lambda[(0.5, "repre")] == 0.5
    assert table.pehe(0.5, "within", "main", "repre") == pytest.approx(30.0)


def test_empty_variant_filter_gives_header_only(tmp_path):
    table = aggregate([_fake_result(1.0, 0, "none", {"0": (1.0, 2.0)})])
    paths = emit_plot_data(table, tmp_path, variants=[])
    assert paths["rmse"].read_text() == "k,split,variant,mean,sd\n"
    assert paths["hsic"].read_text() == "stage,k,variant,mean,sd,median\n"


def test_failed_jobs_become_missing_cells(tmp_path):
    feats = tmp_path / "x.csv"
    feats.write_text("a,b\n1,2\n3,4\n5,6\n", encoding="utf-8")
    cfg = _small(tmp_path, source=str(feats))
    table = run_experiment(cfg)
    assert table.pehe_rows == []
    rows = _read(tmp_path / "out" / "missing_cells.csv")
    assert rows[0]["reason"] == "ConfigError"
    assert rows[0]["variant"] == "reweight"


def test_ini_roundtrip(tmp_path):
    cfg = _small(tmp_path, ks=(0.5, 1.5), lambdas=(0.2,))
    p = tmp_path / "c.ini"
    p.write_text(cfg.to_ini(), encoding="utf-8")
    assert ExperimentConfig.from_ini(p) == cfg
    p.write_text("[experiment]\nbogus = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini(p)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        _small(tmp_path, variants=()).validate()
    with pytest.raises(ConfigError):
        _small(tmp_path, variants=("magic",)).validate()
    with pytest.raises(ConfigError):
        _small(tmp_path, fractions=(0.5, 0.5, 0.5)).validate()


def test_env_overrides_master_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("NETCAUSE_SEED", "17")
    assert _small(tmp_path).with_env().master_seed == 17


def test_splits_share_graph_across_k(tmp_path):
    cfg = _small(tmp_path)
    a, b = build_splits(cfg, 0.5, 0), build_splits(cfg, 1.5, 0)
    assert np.array_equal(a["train"].X, b["train"].X)
    assert np.array_equal(a["test"].graph.edges, b["test"].graph.edges)
    assert derived_seed(0, 1, 2) != derived_seed(0, 2, 1)
