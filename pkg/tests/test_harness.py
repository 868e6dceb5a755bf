import json

import numpy as np
import pytest
import yaml

from neighbor_transfer.harness import ConfigError, from_dict, load_config, run, run_experiment, train
from neighbor_transfer.harness.cli import main
from neighbor_transfer.harness.experiment import make_dataset
from neighbor_transfer.harness.optim import Adam
from neighbor_transfer.metrics import MetricsReport
from neighbor_transfer.models import ModelBundle
from neighbor_transfer.synthgen import write_dataset

TINY_MC = {
    "task": "multiclass-toy", "seed": 2,
    "generator": {"clusters": 4, "classes": 3, "points_per_cluster": 12, "input_dim": 6},
    "model": {"hidden": [8]}, "projection": {"hidden": [16], "output": 8},
    "objective": {"lambda": 1.0, "mu": 5.0},
    "neighborhood": {"n": 3, "refresh_period": 10},
    "batch_size": 8, "max_steps": 60, "eval_every": 10, "patience": 3,
}
TINY_SEQ = {
    "task": "sequence-toy", "seed": 1,
    "generator": {"inputs": 24, "templates": 6, "vocab": 14, "concepts": 4, "region_width": 4, "length": 3},
    "model": {"embed": 4, "state": 6}, "projection": {"hidden": [8], "output": 4},
    "neighborhood": {"n": 2, "refresh_period": 5},
    "batch_size": 4, "max_steps": 10, "eval_every": 5, "patience": 2,
    "eval": {"beam_size": 3, "recall_k": 10, "pool_others": 4, "max_length": 5},
}


class TestConfig:
    def test_defaults_filled(self):
        cfg = from_dict({"task": "multiclass-toy", "seed": 1})
        d = cfg.to_dict()
        assert d["objective"]["lambda"] == 0.5 and d["optimizer"]["projection_lr"] == pytest.approx(1e-4)
        assert d["neighborhood"] == {"n": 5, "refresh_period": 100, "strict": False}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key objective.lamda"):
            from_dict({"task": "multiclass-toy", "objective": {"lamda": 1}})

    def test_range_error_names_key(self):
        with pytest.raises(ConfigError, match="objective.lambda"):
            from_dict({"task": "multiclass-toy", "objective": {"lambda": -1}})

    def test_unknown_generator_param(self):
        with pytest.raises(ConfigError, match="generator.colors"):
            from_dict({"task": "multiclass-toy", "generator": {"colors": 3}})

    def test_mle_modes_zero_lambda(self):
        cfg = from_dict({"task": "multiclass-toy", "objective": {"mode": "ce-l2", "lambda": 2}})
        assert cfg.objective_config("multiclass").lam == 0.0

    def test_yaml_and_replace(self, tmp_path):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(TINY_MC))
        cfg = load_config(tmp_path / "c.yaml").replace(**{"objective.mode": "mle", "seed": 9})
        assert cfg.objective.mode == "mle" and cfg.seed == 9 and cfg.generator["clusters"] == 4


class TestAdam:
    def test_matches_reference(self, rng):
        p = {"w": rng.normal(size=3)}
        w0 = p["w"].copy()
        grads = [rng.normal(size=3) for _ in range(4)]
        opt = Adam({"task": 0.01})
        for g in grads:
            opt.step("task", p, {"w": g})
        m = v = np.zeros(3)
        w = w0
        for t, g in enumerate(grads, 1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p["w"], w, atol=1e-15)

    def test_groups_independent(self):
        opt = Adam({"a": 1.0, "b": 0.1})
        pa, pb = {"w": np.zeros(1)}, {"w": np.zeros(1)}
        opt.step("a", pa, {"w": np.ones(1)})
        opt.step("b", pb, {"w": np.ones(1)})
        assert pa["w"][0] == pytest.approx(-1.0, rel=1e-6) and pb["w"][0] == pytest.approx(-0.1, rel=1e-6)


class TestTraining:
    def test_history_and_best_metric(self):
        cfg = from_dict(TINY_MC)
        bundle, hist = train(cfg, make_dataset(cfg))
        assert hist.best_metric == min(m for _, m in hist.evals)
        assert hist.refreshes[0] == (0, 0)
        assert all(v == s for s, v in hist.refreshes)
        assert set(hist.pairings) == {8 * 4}

    def test_no_refine_keeps_projection(self):
        cfg = from_dict({**TINY_MC, "objective": {"mode": "no-refine", "lambda": 1.0}})
        ds = make_dataset(cfg)
        from neighbor_transfer.harness.training import build_bundle

        before = build_bundle(cfg, ds).projection
        bundle, hist = train(cfg, ds)
        assert all(np.array_equal(before[k], bundle.projection[k]) for k in before)
        assert hist.refreshes == [(0, 0)]

    def test_ours_moves_projection(self):
        cfg = from_dict(TINY_MC)
        ds = make_dataset(cfg)
        from neighbor_transfer.harness.training import build_bundle

        before = build_bundle(cfg, ds).projection
        bundle, _ = train(cfg, ds)
        assert any(not np.array_equal(before[k], bundle.projection[k]) for k in before)

    def test_multilabel_runs(self):
        cfg = from_dict({**TINY_MC, "task": "multilabel-toy",
                         "generator": {"clusters": 4, "labels": 12, "points_per_cluster": 10,
                                       "positives_per_cluster": 4, "input_dim": 6}})
        res = run(cfg)
        assert set(res.report.metrics) == {"precision@1", "precision@5", "precision@10"}

    def test_sequence_runs(self):
        res = run(from_dict(TINY_SEQ))
        assert set(res.report.metrics) == {"oracle_token_f1@3", "distinct_4grams", "distinct_1grams",
                                           "recall_5@10"}
        assert 0 <= res.report.metrics["recall_5@10"] <= 5


class TestExperiment:
    def test_artifacts(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps(TINY_MC))
        assert run_experiment(tmp_path / "c.json", tmp_path / "out") == 0
        out = tmp_path / "out"
        for name in ("report.json", "metrics.csv", "checkpoint_best.bin", "config.resolved.json", "history.json"):
            assert (out / name).exists(), name
        report = MetricsReport.from_json(out / "report.json")
        bundle, header = ModelBundle.load(out / "checkpoint_best.bin")
        assert header["seed"] == 2 and report.extra["best_step"] == header["step"]

    def test_failure_marker(self, tmp_path):
        bad = {**TINY_MC, "generator": {**TINY_MC["generator"], "classes": 2}}
        (tmp_path / "c.json").write_text(json.dumps(bad))
        assert run_experiment(tmp_path / "c.json", tmp_path / "out") == 1
        assert (tmp_path / "out" / "FAILED").exists()

    def test_sweep_subdirectories(self, tmp_path):
        cfg = {**TINY_MC, "max_steps": 20, "sweep": {"lambda": [0.0, 1.0]}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert run_experiment(tmp_path / "c.json", tmp_path / "out") == 0
        groups = {json.loads((tmp_path / "out" / d / "report.json").read_text())["extra"]["run_group"]
                  for d in ("lambda=0.0", "lambda=1.0")}
        assert len(groups) == 1


class TestCli:
    def test_gen_then_train_and_eval(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps(TINY_MC))
        assert main(["gen", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "data")]) == 0
        assert main(["train", "--config", str(tmp_path / "c.json"), "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / "tr")]) == 0
        assert main(["eval", "--config", str(tmp_path / "c.json"), "--data", str(tmp_path / "data"),
                     "--checkpoint", str(tmp_path / "tr" / "checkpoint_best.bin"),
                     "--out", str(tmp_path / "ev")]) == 0
        assert "kl_mean" in json.loads((tmp_path / "ev" / "report.json").read_text())["metrics"]

    def test_dataset_task(self, tmp_path):
        cfg = from_dict(TINY_MC)
        write_dataset(make_dataset(cfg), tmp_path / "data")
        res = run(from_dict({**TINY_MC, "task": "dataset", "dataset": str(tmp_path / "data"),
                             "generator": {}}))
        assert res.dataset.fingerprint() == make_dataset(cfg).fingerprint()

    def test_bad_config_exit_code(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"task": "nope"}))
        assert main(["gen", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 2
        assert "task" in capsys.readouterr().err
