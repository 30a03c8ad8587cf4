"""CLI pipeline: artifacts, manifests, exit codes, env overrides."""

import json
import os
from pathlib import Path

import numpy as np
import pytest
import yaml

from segnas.cli import (
    EXIT_ARTIFACT,
    EXIT_CONFIG,
    EXIT_LOCKED,
    EXIT_MISSING,
    EXIT_OK,
    EXIT_OVERWRITE,
    EXIT_WEIGHTS,
    main,
)

TINY = {
    "cells": [1, 1, 1],
    "nodes_per_cell": 1,
    "initial_channels": 4,
    "agg_channels": 8,
    "epochs": 3,
    "warmup_epochs": 1,
    "batch_size": 4,
    "gamma": 0.01,
    "retrain_epochs": 1,
    "bench_reps": 2,
    "bench_warmup": 0,
    "seed": 9,
    "dataset": {"height": 32, "width": 64, "train": 6, "val": 3, "test": 3, "seed": 1},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def pipeline(tmp_path, config_file):
    """A completed bench -> search -> derive -> retrain -> eval run."""
    out = tmp_path / "run"
    for cmd in ("bench-lat", "search", "derive", "retrain", "eval"):
        assert run(cmd, "--config", config_file, "--out", out) == EXIT_OK
    return out


class TestPipeline:
    def test_end_to_end_artifacts_and_manifest(self, pipeline):
        for name in ("latency.json", "checkpoint.npz", "metrics.csv", "trajectory.json",
                     "architecture.json", "weights.npz", "retrain.json", "eval_val.json"):
            assert (pipeline / name).exists(), name
        manifest = json.loads((pipeline / "manifest.json").read_text())
        assert manifest["config_hash"]
        for stage in ("bench", "search", "derive", "retrain", "eval_val"):
            assert manifest["status"][stage] == "done"
        for path in manifest["artifacts"].values():
            assert Path(path).exists()

    def test_metrics_csv_has_documented_columns(self, pipeline):
        header = (pipeline / "metrics.csv").read_text().splitlines()[0]
        assert header == ("epoch,lambda,train_ce,train_loss,expected_latency_us,"
                          "depth_hc1,depth_hc2,depth_hc3,"
                          "expected_depth_hc1,expected_depth_hc2,expected_depth_hc3")

    def test_derive_on_warmup_only_checkpoint_gives_depth_one(self, tmp_path, config_file):
        # warm-up leaves uniform depth logits; ties derive to depth 1
        out = tmp_path / "warm"
        cfg = dict(TINY, epochs=2, warmup_epochs=1, cells=[2, 2, 2])
        path = tmp_path / "warm.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert run("bench-lat", "--config", path, "--out", out) == EXIT_OK
        assert run("search", "--config", path, "--out", out) == EXIT_OK
        assert run("derive", "--config", path, "--out", out) == EXIT_OK
        doc = json.loads((out / "architecture.json").read_text())
        assert [hc["depth"] for hc in doc["hyper_cells"]] == [1, 1, 1]

    def test_random_search_artifact(self, tmp_path, config_file):
        out = tmp_path / "run"
        assert run("bench-lat", "--config", config_file, "--out", out) == EXIT_OK
        assert run("random-search", "--config", config_file, "--out", out,
                   "--samples", 2, "--epochs", 0) == EXIT_OK
        doc = json.loads((out / "random_search.json").read_text())
        assert len(doc["samples"]) == 2
        assert (out / "random_best_architecture.json").exists()


class TestExportPlots:
    def test_series_and_consistency(self, pipeline):
        assert run("export-plots", "--out", pipeline) == EXIT_OK
        doc = json.loads((pipeline / "trajectory.json").read_text())
        arch = json.loads((pipeline / "architecture.json").read_text())
        for s in range(3):
            rows = (pipeline / "plots" / f"depth_hc{s + 1}.csv").read_text().splitlines()[1:]
            assert len(rows) == len(doc["records"])  # one row per epoch
            n_max = TINY["cells"][s]
            for row in rows:
                _, actual, expected = row.split(",")
                assert 1 <= int(actual) <= n_max
                assert 1.0 <= float(expected) <= n_max
            final_depth = int(rows[-1].split(",")[1])
            assert final_depth == arch["hyper_cells"][s]["depth"]
        sweep = (pipeline / "plots" / "gamma_sweep.csv").read_text().splitlines()
        assert sweep[0] == "gamma,latency_cells_us,miou,run"
        assert len(sweep) == 2  # one completed run

    def test_missing_trajectory(self, tmp_path):
        assert run("export-plots", "--out", tmp_path / "empty") == EXIT_MISSING


class TestErrorClasses:
    def test_missing_table_for_search(self, tmp_path, config_file):
        assert run("search", "--config", config_file, "--out", tmp_path / "x") == EXIT_MISSING

    def test_unknown_config_key(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("cells: [1, 1, 1]\nwarp_speed: 9\n")
        assert run("print-config", "--config", bad) == EXIT_CONFIG

    def test_invalid_config_value(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("gamma: -0.5\n")
        assert run("print-config", "--config", bad) == EXIT_CONFIG

    def test_bench_refuses_overwrite(self, tmp_path, config_file):
        out = tmp_path / "run"
        assert run("bench-lat", "--config", config_file, "--out", out) == EXIT_OK
        assert run("bench-lat", "--config", config_file, "--out", out) == EXIT_OVERWRITE
        assert run("bench-lat", "--config", config_file, "--out", out, "--force") == EXIT_OK

    def test_config_hash_mismatch_on_derive(self, tmp_path, config_file):
        out = tmp_path / "run"
        assert run("bench-lat", "--config", config_file, "--out", out) == EXIT_OK
        assert run("search", "--config", config_file, "--out", out) == EXIT_OK
        other = tmp_path / "other.yaml"
        other.write_text(yaml.safe_dump(dict(TINY, gamma=0.33)))
        assert run("derive", "--config", other, "--out", out) == EXIT_ARTIFACT

    def test_bad_architecture_vs_bad_weights_codes_differ(self, pipeline, config_file):
        arch_path = pipeline / "architecture.json"
        good = arch_path.read_text()
        arch_path.write_text(good.replace('"version": 1', '"version": 7'))
        bad_arch = run("eval", "--config", config_file, "--out", pipeline)
        arch_path.write_text(good)

        weights_path = pipeline / "weights.npz"
        weights_path.write_bytes(b"not a weights file")
        bad_weights = run("eval", "--config", config_file, "--out", pipeline)

        assert bad_arch == EXIT_ARTIFACT
        assert bad_weights == EXIT_WEIGHTS
        assert bad_arch != bad_weights

    def test_weights_arch_mismatch_detected(self, pipeline, tmp_path, config_file):
        # retrain against a different architecture, then eval with the original
        other_run = tmp_path / "other"
        cfg2 = dict(TINY, seed=77, cells=[2, 1, 1])
        path2 = tmp_path / "cfg2.yaml"
        path2.write_text(yaml.safe_dump(cfg2))
        assert run("bench-lat", "--config", path2, "--out", other_run) == EXIT_OK
        assert run("search", "--config", path2, "--out", other_run) == EXIT_OK
        assert run("derive", "--config", path2, "--out", other_run) == EXIT_OK
        assert run("eval", "--config", config_file, "--out", pipeline,
                   "--arch", other_run / "architecture.json") == EXIT_WEIGHTS

    def test_lock_blocks_concurrent_use(self, tmp_path, config_file):
        out = tmp_path / "run"
        out.mkdir()
        (out / ".lock").write_text("held")
        assert run("bench-lat", "--config", config_file, "--out", out) == EXIT_LOCKED

    def test_rejects_unknown_table_version(self, tmp_path, config_file):
        out = tmp_path / "run"
        out.mkdir()
        (out / "latency.json").write_text('{"version": 5, "entries": {}}')
        assert run("search", "--config", config_file, "--out", out) == EXIT_ARTIFACT


class TestConfigResolution:
    def test_print_config_round_trips(self, tmp_path, config_file, capsys):
        assert run("print-config", "--config", config_file) == EXIT_OK
        doc = yaml.safe_load(capsys.readouterr().out)
        assert doc["cells"] == [1, 1, 1]
        assert doc["dataset"]["height"] == 32
        assert doc["warmup_epochs"] == 1

    def test_seed_flag_overrides_config(self, config_file, capsys):
        assert run("print-config", "--config", config_file, "--seed", 123) == EXIT_OK
        assert yaml.safe_load(capsys.readouterr().out)["seed"] == 123

    def test_env_overrides(self, tmp_path, config_file, capsys, monkeypatch):
        monkeypatch.setenv("SEGNAS_CONFIG", str(config_file))
        monkeypatch.setenv("SEGNAS_SEED", "404")
        assert run("print-config") == EXIT_OK
        doc = yaml.safe_load(capsys.readouterr().out)
        assert doc["seed"] == 404 and doc["cells"] == [1, 1, 1]

    def test_flag_beats_env(self, config_file, capsys, monkeypatch):
        monkeypatch.setenv("SEGNAS_SEED", "404")
        assert run("print-config", "--config", config_file, "--seed", 5) == EXIT_OK
        assert yaml.safe_load(capsys.readouterr().out)["seed"] == 5


class TestDeterminismAcrossReruns:
    def test_search_artifacts_reproduce_from_same_table(self, tmp_path, config_file):
        # one measured table, two full search->derive passes: byte-identical
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run("bench-lat", "--config", config_file, "--out", out1) == EXIT_OK
        table = out1 / "latency.json"
        for out in (out1, out2):
            assert run("search", "--config", config_file, "--out", out, "--table", table) == EXIT_OK
            assert run("derive", "--config", config_file, "--out", out, "--table", table) == EXIT_OK
        assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
        assert (out1 / "architecture.json").read_bytes() == (out2 / "architecture.json").read_bytes()
