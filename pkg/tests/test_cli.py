import json
import os

import numpy as np
import pytest

from metakkl.cli import main

TINY_CONFIG = {
    "seed": 0,
    "dataset": {
        "t_train": 4.0,
        "t_eval": 6.0,
        "sampling_horizon": 8.0,
        "n_train_tasks": 2,
    },
    "training": {"epochs": 4, "batch_size": 64, "hidden": [8, 8]},
    "meta": {
        "epochs": 4,
        "n_adapt": 2,
        "n_adapt_points": 8,
        "n_query_points": 16,
        "pretrain_epochs": 2,
    },
    "adaptation": {"n_batch": 8, "window_length": 5.0},
    "evaluation": {
        "n_validation": 2,
        "n_out_of_range": 2,
        "seeds": [0, 1],
        "grid_resolution": 2,
        "transient": 2.0,
    },
}


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


class TestGenerate:
    def test_writes_task_files_and_manifest(self, workdir):
        out = workdir / "data"
        assert run("generate", "--config", workdir / "config.json", "--out", out,
                   "--jobs", 1) == 0
        assert sorted(p.name for p in out.glob("task_*.csv")) == ["task_0.csv", "task_1.csv"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["tasks"]) == 2

    def test_rerun_byte_identical(self, workdir):
        out1, out2 = workdir / "d1", workdir / "d2"
        run("generate", "--config", workdir / "config.json", "--out", out1, "--jobs", 1)
        run("generate", "--config", workdir / "config.json", "--out", out2, "--jobs", 1)
        for name in ("task_0.csv", "task_1.csv", "manifest.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_invalid_config_exit_2(self, workdir):
        bad = workdir / "bad.json"
        bad.write_text(json.dumps({"dataset": {"distribution": {"lambda_range": [2.0, 2.0]}}}))
        assert run("generate", "--config", bad, "--out", workdir / "x") == 2

    def test_unknown_key_exit_2(self, workdir):
        bad = workdir / "bad2.json"
        bad.write_text(json.dumps({"trainign": {}}))
        assert run("generate", "--config", bad, "--out", workdir / "x") == 2


class TestTrain:
    @pytest.fixture
    def data_dir(self, workdir):
        out = workdir / "data"
        run("generate", "--config", workdir / "config.json", "--out", out, "--jobs", 1)
        return out

    def test_parallel_checkpoints(self, workdir, data_dir):
        out = workdir / "ckpt"
        assert run("train", "--config", workdir / "config.json", "--data", data_dir,
                   "--method", "parallel", "--out", out, "--jobs", 1) == 0
        assert (out / "theta.ckpt.json").exists()
        assert (out / "eta.ckpt.json").exists()
        assert (out / "loss_history.csv").exists()
        assert not (out / "meta.ckpt.json").exists()

    def test_meta_writes_alpha_checkpoint(self, workdir, data_dir):
        out = workdir / "ckpt_meta"
        assert run("train", "--config", workdir / "config.json", "--data", data_dir,
                   "--method", "meta", "--pretrain", "--out", out, "--jobs", 1) == 0
        doc = json.loads((out / "meta.ckpt.json").read_text())
        assert doc["alpha"] is not None

    def test_seed_determinism_and_flag_precedence(self, workdir, data_dir, monkeypatch):
        o1, o2, o3 = workdir / "c1", workdir / "c2", workdir / "c3"
        run("train", "--config", workdir / "config.json", "--data", data_dir,
            "--method", "parallel", "--out", o1, "--seed", 7, "--jobs", 1)
        run("train", "--config", workdir / "config.json", "--data", data_dir,
            "--method", "parallel", "--out", o2, "--seed", 7, "--jobs", 1)
        assert (o1 / "theta.ckpt.json").read_bytes() == (o2 / "theta.ckpt.json").read_bytes()
        # env seed differs, flag wins
        monkeypatch.setenv("METAKKL_SEED", "11")
        run("train", "--config", workdir / "config.json", "--data", data_dir,
            "--method", "parallel", "--out", o3, "--seed", 7, "--jobs", 1)
        assert (o1 / "theta.ckpt.json").read_bytes() == (o3 / "theta.ckpt.json").read_bytes()

    def test_env_seed_used_without_flag(self, workdir, data_dir, monkeypatch):
        o1, o2 = workdir / "e1", workdir / "e2"
        monkeypatch.setenv("METAKKL_SEED", "13")
        run("train", "--config", workdir / "config.json", "--data", data_dir,
            "--method", "parallel", "--out", o1, "--jobs", 1)
        monkeypatch.delenv("METAKKL_SEED")
        run("train", "--config", workdir / "config.json", "--data", data_dir,
            "--method", "parallel", "--out", o2, "--seed", 13, "--jobs", 1)
        assert (o1 / "theta.ckpt.json").read_bytes() == (o2 / "theta.ckpt.json").read_bytes()

    def test_pinn_weight_zero_equals_sequential(self, workdir, data_dir):
        o1, o2 = workdir / "s1", workdir / "s2"
        run("train", "--config", workdir / "config.json", "--data", data_dir,
            "--method", "sequential", "--out", o1, "--jobs", 1)
        run("train", "--config", workdir / "config.json", "--data", data_dir,
            "--method", "pinn", "--pinn-weight", 0, "--out", o2, "--jobs", 1)
        assert (o1 / "theta.ckpt.json").read_bytes() == (o2 / "theta.ckpt.json").read_bytes()
        assert (o1 / "eta.ckpt.json").read_bytes() == (o2 / "eta.ckpt.json").read_bytes()

    def test_missing_data_exit_2(self, workdir):
        assert run("train", "--config", workdir / "config.json",
                   "--data", workdir / "nope", "--method", "parallel",
                   "--out", workdir / "x") == 2


class TestEvalAndAdapt:
    @pytest.fixture
    def x0_config(self, workdir):
        doc = json.loads((workdir / "config.json").read_text())
        doc["dataset"]["distribution"] = {"kind": "x0-variation", "fixed_lambda": 1.0}
        path = workdir / "x0_config.json"
        path.write_text(json.dumps(doc))
        return path

    def test_sampling_requires_meta_checkpoint(self, workdir, x0_config):
        assert run("eval", "--config", x0_config, "--experiment", "sampling",
                   "--out", workdir / "x") == 2

    def test_sampling_with_checkpoint(self, workdir, x0_config):
        data = workdir / "xdata"
        run("generate", "--config", x0_config, "--out", data, "--jobs", 1)
        ckpt = workdir / "xckpt"
        run("train", "--config", x0_config, "--data", data, "--method", "meta",
            "--out", ckpt, "--jobs", 1)
        out = workdir / "sampling"
        assert run("eval", "--config", x0_config, "--experiment", "sampling",
                   "--checkpoints", ckpt, "--out", out, "--jobs", 1) == 0
        text = (out / "results.csv").read_text()
        assert "window-random-delayed" in text

    def test_hash_mismatch_exit_2_force_overrides(self, workdir, x0_config):
        data = workdir / "xdata2"
        run("generate", "--config", x0_config, "--out", data, "--jobs", 1)
        ckpt = workdir / "xckpt2"
        run("train", "--config", x0_config, "--data", data, "--method", "meta",
            "--out", ckpt, "--jobs", 1)
        # different config document -> different hash
        doc = json.loads(x0_config.read_text())
        doc["evaluation"]["n_validation"] = 3
        other = workdir / "other.json"
        other.write_text(json.dumps(doc))
        assert run("eval", "--config", other, "--experiment", "sampling",
                   "--checkpoints", ckpt, "--out", workdir / "s1") == 2
        assert run("eval", "--config", other, "--experiment", "sampling",
                   "--checkpoints", ckpt, "--out", workdir / "s2",
                   "--force", "--jobs", 1) == 0

    def test_adapt_pre_post_report(self, workdir, x0_config):
        data = workdir / "xdata3"
        run("generate", "--config", x0_config, "--out", data, "--jobs", 1)
        ckpt = workdir / "xckpt3"
        run("train", "--config", x0_config, "--data", data, "--method", "meta",
            "--out", ckpt, "--jobs", 1)
        out = workdir / "adapted"
        assert run("adapt", "--config", x0_config,
                   "--checkpoint", ckpt / "meta.ckpt.json",
                   "--strategy", "minimum", "--task-x0", "0.4,0.3",
                   "--out", out, "--jobs", 1) == 0
        lines = (out / "adapt_report.csv").read_text().strip().splitlines()
        assert lines[0].startswith("stage,strategy")
        assert len(lines) == 3
        assert (out / "eta_adapted.ckpt.json").exists()

    def test_adapt_rejects_checkpoint_without_alpha(self, workdir, x0_config):
        data = workdir / "xdata4"
        run("generate", "--config", x0_config, "--out", data, "--jobs", 1)
        ckpt = workdir / "xckpt4"
        run("train", "--config", x0_config, "--data", data, "--method", "parallel",
            "--out", ckpt, "--jobs", 1)
        assert run("adapt", "--config", x0_config,
                   "--checkpoint", ckpt / "eta.ckpt.json",
                   "--out", workdir / "nope") == 2


class TestEvalExperiments:
    def test_lambda_experiment_outputs(self, workdir):
        out = workdir / "lambda_out"
        assert run("eval", "--config", workdir / "config.json", "--experiment",
                   "lambda", "--out", out, "--jobs", 1) == 0
        header = (out / "results.csv").read_text().splitlines()[0]
        assert header == "method,task_id,lambda,x0_1,x0_2,strategy,seed,e_bar_t"
        assert (out / "curves.csv").read_text().startswith("method,t,e_bar_T")

    def test_x0_experiment_outputs(self, workdir):
        doc = json.loads((workdir / "config.json").read_text())
        doc["dataset"]["distribution"] = {"kind": "x0-variation", "fixed_lambda": 1.0}
        cfg = workdir / "x0cfg.json"
        cfg.write_text(json.dumps(doc))
        out = workdir / "x0_out"
        assert run("eval", "--config", cfg, "--experiment", "x0", "--out", out,
                   "--jobs", 1) == 0
        for name in ("results_in.csv", "results_out.csv", "results_noisy.csv",
                     "curves.csv"):
            assert (out / name).exists()

    def test_grid_experiment_outputs(self, workdir):
        doc = json.loads((workdir / "config.json").read_text())
        doc["dataset"]["distribution"] = {"kind": "x0-variation", "fixed_lambda": 1.0}
        doc["evaluation"]["seeds"] = [0]
        cfg = workdir / "gridcfg.json"
        cfg.write_text(json.dumps(doc))
        out = workdir / "grid_out"
        assert run("eval", "--config", cfg, "--experiment", "grid",
                   "--method", "parallel", "--out", out, "--jobs", 1) == 0
        rows = (out / "grid.csv").read_text().strip().splitlines()
        assert len(rows) == 2 and len(rows[0].split(",")) == 2
        axes = json.loads((out / "grid_axes.json").read_text())
        assert axes["method"] == "parallel"
