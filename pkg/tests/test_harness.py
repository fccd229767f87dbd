import json
import os

import numpy as np
import pytest

from docir_lab import cli, harness, ppo
from docir_lab.harness import (OBJECT_GRID, curves, evaluate, preset_runs,
                               rolling_mean, run_suite, train_run)
from docir_lab.ppo import PPOHypers, TrainConfig

TINY_HYPERS = PPOHypers(rollout_len=8, n_envs=2, epochs=1, minibatches=2)


def tiny_cfg(out_dir, **kw):
    kw.setdefault("task", "pick")
    kw.setdefault("variant", "fixed_target")
    kw.setdefault("n_cubes", 2)
    kw.setdefault("n_plates", 1)
    kw.setdefault("repr", "docir")
    kw.setdefault("seed", 0)
    kw.setdefault("total_steps", 32)
    kw.setdefault("resolution", 24)
    kw.setdefault("eval_every", 2)
    kw.setdefault("eval_episodes", 1)
    kw.setdefault("hypers", TINY_HYPERS)
    return TrainConfig(out_dir=str(out_dir), **kw)


class TestRollingMean:
    def test_simple_window(self):
        np.testing.assert_allclose(rolling_mean([1, 2, 3, 4], 2),
                                   [1.5, 2.5, 3.5])

    def test_window_equal_length(self):
        np.testing.assert_allclose(rolling_mean([2.0, 4.0, 6.0], 3), [4.0])

    def test_window_larger_than_series_collapses(self):
        np.testing.assert_allclose(rolling_mean([1.0, 3.0], 50), [2.0])

    def test_empty_series(self):
        assert rolling_mean([], 5).size == 0

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(37)
        w = 5
        got = rolling_mean(x, w)
        expected = [x[i:i + w].mean() for i in range(len(x) - w + 1)]
        np.testing.assert_allclose(got, expected, atol=1e-12)


class TestPresets:
    def test_table1_full_grid_arithmetic(self, tmp_path):
        init = tmp_path / "init.json"
        init.write_text(json.dumps({"states": []}))
        runs = preset_runs("paper-table1-desk", init_set_path=str(init))
        # 2 tasks x 2 variants x 4 sizes x 3 reprs x 3 seeds
        assert len(runs) == 144
        assert {r.task for r in runs} == {"pick", "place"}
        assert all(r.init_set_path == str(init) for r in runs if r.task == "place")
        assert all(r.init_set_path is None for r in runs if r.task == "pick")

    def test_table1_without_init_set_drops_place(self):
        runs = preset_runs("paper-table1-desk")
        assert len(runs) == 72
        assert all(r.task == "pick" for r in runs)

    def test_ablations_preset(self):
        runs = preset_runs("ablations", steps=1000, seeds=(0, 1))
        assert len(runs) == 8
        assert {r.repr for r in runs} == {"docir", "ablation-a",
                                          "ablation-b", "ablation-c"}
        assert all(r.total_steps == 1000 and (r.n_cubes, r.n_plates) == (3, 2)
                   for r in runs)

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError):
            preset_runs("nope")

    def test_object_grid(self):
        assert OBJECT_GRID == {3: (2, 1), 5: (3, 2), 7: (4, 3), 9: (5, 4)}


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One tiny vision run shared by the evaluate/harvest/curves tests."""
    out = tmp_path_factory.mktemp("run") / "r0"
    cfg = tiny_cfg(out)
    summary = train_run(cfg)
    return cfg, summary


class TestTrainRunAndEvaluate:
    def test_manifest_written(self, trained_run):
        cfg, summary = trained_run
        man = json.load(open(os.path.join(cfg.out_dir, "manifest.json")))
        assert man["repr"] == "docir" and man["resolution"] == 24
        assert man["summary"]["steps"] == 32
        assert os.path.exists(summary["ckpt_best"])

    def test_evaluate_deterministic(self, trained_run):
        cfg, summary = trained_run
        a = evaluate(summary["ckpt_best"], episodes=2)
        b = evaluate(summary["ckpt_best"], episodes=2)
        assert a == b
        assert 0.0 <= a <= 1.0

    def test_evaluate_ood_variants_run(self, trained_run):
        cfg, summary = trained_run
        for ood in ("recolor", "distractors"):
            rate = evaluate(summary["ckpt_best"], episodes=1, ood=ood)
            assert 0.0 <= rate <= 1.0
        with pytest.raises(ValueError):
            evaluate(summary["ckpt_best"], episodes=1, ood="fog")


class TestSuite:
    def _runs(self, n_seeds=2):
        return [tiny_cfg("ignored", seed=s) for s in range(n_seeds)]

    def test_suite_writes_results_and_resumes(self, tmp_path):
        suite_dir = tmp_path / "suite"
        cells, csv_path = run_suite(self._runs(), str(suite_dir),
                                    eval_episodes=1, seeds_per_cell=2)
        assert len(cells) == 1 and not cells[0].partial
        assert len(cells[0].seed_rates) == 2
        lines = open(csv_path).read().strip().splitlines()
        assert lines[0].startswith("task,variant")
        assert len(lines) == 2

        # resume: manifest already lists both runs, so nothing retrains
        manifest = suite_dir / "manifest.jsonl"
        before = manifest.read_text()
        mtimes = {p: os.path.getmtime(os.path.join(suite_dir, p))
                  for p in os.listdir(suite_dir)}
        cells2, _ = run_suite(self._runs(), str(suite_dir),
                              eval_episodes=1, seeds_per_cell=2)
        assert manifest.read_text() == before
        assert cells2[0].seed_rates == cells[0].seed_rates
        for p, t in mtimes.items():
            if p.startswith("pick"):
                assert os.path.getmtime(os.path.join(suite_dir, p)) == t

    def test_partial_cell_flagged(self, tmp_path):
        cells, _ = run_suite(self._runs(n_seeds=1), str(tmp_path / "s"),
                             eval_episodes=1, seeds_per_cell=3)
        assert cells[0].partial


class TestCurves:
    def _write_metrics(self, run_dir, repr_, values):
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "manifest.json"), "w") as f:
            json.dump({"repr": repr_}, f)
        path = os.path.join(run_dir, "metrics.jsonl")
        with open(path, "w") as f:
            for i, v in enumerate(values):
                f.write(json.dumps({"kind": "update", "step": (i + 1) * 10,
                                    "success_rate": v}) + "\n")
            f.write(json.dumps({"kind": "eval", "step": 999,
                                "success_rate": 1.0}) + "\n")
        return path

    def test_aggregation_matches_recomputed_oracle(self, tmp_path):
        rng = np.random.default_rng(7)
        seeds = [rng.random(20) for _ in range(3)]
        paths = [self._write_metrics(tmp_path / f"seed{i}", "docir", v)
                 for i, v in enumerate(seeds)]
        csv_path, svg_path = curves(paths, str(tmp_path / "curve"), window=4)
        rows = [l.split(",") for l in open(csv_path).read().strip().splitlines()[1:]]
        assert all(r[0] == "docir" for r in rows)
        got_mean = np.array([float(r[2]) for r in rows])
        got_min = np.array([float(r[3]) for r in rows])
        per_seed = np.stack([rolling_mean(v, 4) for v in seeds])
        np.testing.assert_allclose(got_mean, per_seed.mean(axis=0), atol=1e-6)
        np.testing.assert_allclose(got_min, per_seed.min(axis=0), atol=1e-6)
        # eval lines are excluded: 20 - 4 + 1 points
        assert len(rows) == 17
        svg = open(svg_path).read()
        assert svg.startswith("<svg") and "docir" in svg and "polyline" in svg

    def test_nan_values_forward_filled(self, tmp_path):
        path = self._write_metrics(tmp_path / "s0", "flat",
                                   [0.5, None, None, 0.7])
        csv_path, _ = curves([path], str(tmp_path / "c"), window=1)
        vals = [float(l.split(",")[2])
                for l in open(csv_path).read().strip().splitlines()[1:]]
        np.testing.assert_allclose(vals, [0.5, 0.5, 0.5, 0.7])

    def test_multiple_labels_kept_separate(self, tmp_path):
        self._write_metrics(tmp_path / "a", "docir", [0.1, 0.2])
        self._write_metrics(tmp_path / "b", "flat", [0.9, 0.8])
        csv_path, _ = curves(str(tmp_path / "*" / "metrics.jsonl"),
                             str(tmp_path / "c"), window=1)
        labels = {l.split(",")[0]
                  for l in open(csv_path).read().strip().splitlines()[1:]}
        assert labels == {"docir", "flat"}

    def test_no_match_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            curves(str(tmp_path / "nothing*.jsonl"), str(tmp_path / "c"))


class TestCLI:
    def test_train_eval_curves_harvest_end_to_end(self, tmp_path, capsys):
        out = tmp_path / "run"
        rc = cli.main(["train", "--task", "pick", "--variant", "fixed",
                       "--objects", "3", "--repr", "docir", "--seed", "0",
                       "--steps", "32", "--resolution", "24",
                       "--rollout-len", "8", "--n-envs", "2",
                       "--out", str(out)])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["steps"] == 32

        rc = cli.main(["eval", "--checkpoint", summary["ckpt_best"],
                       "--episodes", "1"])
        assert rc == 0
        result = json.loads(capsys.readouterr().out)
        assert 0.0 <= result["success_rate"] <= 1.0

        rc = cli.main(["curves", "--in", str(out / "metrics.jsonl"),
                       "--out", str(tmp_path / "curve"), "--window", "2"])
        assert rc == 0
        csv_path, svg_path = capsys.readouterr().out.strip().splitlines()
        assert os.path.exists(csv_path) and os.path.exists(svg_path)

    def test_config_file_merge(self, tmp_path, capsys):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({
            "steps": 32, "resolution": 24, "rollout-len": 8, "n-envs": 2,
            "out": str(tmp_path / "cfgrun")}))
        rc = cli.main(["train", "--config", str(cfg_file), "--seed", "1"])
        assert rc == 0
        man = json.load(open(tmp_path / "cfgrun" / "manifest.json"))
        assert man["seed"] == 1 and man["total_steps"] == 32

    def test_config_unknown_key_rejected(self, tmp_path):
        cfg_file = tmp_path / "bad.json"
        cfg_file.write_text(json.dumps({"bogus": 1}))
        with pytest.raises(SystemExit):
            cli.main(["train", "--config", str(cfg_file)])

    def test_data_root_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DOCIR_LAB_DATA", str(tmp_path / "data"))
        assert harness.data_root() == str(tmp_path / "data")
        monkeypatch.delenv("DOCIR_LAB_DATA")
        assert harness.data_root() == "runs"
