"""
CLI のテスト (run() を直接呼ぶ)
"""

import csv
import json

import numpy as np
import pytest

from kv_shapley.cli.main import (
    EXIT_CONFIG,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    EXIT_VERIFICATION,
    exit_code_for,
    run,
)
from kv_shapley.cli.reports import MaskExperimentReport, load_run_config
from kv_shapley.core.errors import (
    CapabilityError,
    ConfigurationError,
    EstimateError,
    MalformedReplyError,
    NotConvergedError,
    TableFormatError,
    VerificationError,
)
from kv_shapley.estimator.table import load_table
from kv_shapley.eviction.tensor_io import read_retained_file, read_tensor_file, random_bundles, write_tensor_file


def write_json(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def read_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def additive_game_file(tmp_path):
    return write_json(tmp_path / "additive.json",
                      {"family": "additive", "n": 4, "params": {"weights": [1, 2, 3, 4]}})


@pytest.fixture
def saboteur_game_file(tmp_path):
    return write_json(tmp_path / "saboteur.json", {
        "family": "saboteur", "n": 8,
        "params": {"base": 0.5, "helpful": {"0": 0.2, "3": 0.15, "5": 0.1},
                   "harmful": {"2": -0.2, "6": -0.15}},
    })


@pytest.fixture
def scores_file(tmp_path):
    path = tmp_path / "scores.csv"
    path.write_text("player_index,label,ssv\n0,p0,0.5\n1,p1,0.3\n2,p2,0.1\n3,p3,-0.2\n", encoding="utf-8")
    return str(path)


class TestVerify:
    def test_passes_small_n(self, tmp_path):
        out = tmp_path / "verify"
        assert run(["--out", str(out), "--seed", "3", "verify", "--n", "6", "--games", "10"]) == EXIT_OK
        report = json.loads((out / "verify.json").read_text(encoding="utf-8"))
        assert all(check["passed"] for check in report["checks"].values())
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["exit_code"] == 0 and manifest["status"] == "ok"

    def test_single_player(self, tmp_path):
        assert run(["--out", str(tmp_path), "verify", "--n", "1", "--games", "5"]) == EXIT_OK

    def test_refuses_large_n(self, tmp_path):
        assert run(["--out", str(tmp_path), "verify", "--n", "11"]) == EXIT_CONFIG
        manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["status"] == "failed"


class TestEstimate:
    def test_additive_converges(self, tmp_path, additive_game_file):
        out = tmp_path / "est"
        code = run(["--out", str(out), "--seed", "7", "estimate", "--game", additive_game_file,
                    "--slices", "1", "2", "3", "4", "--samples", "20000", "--checkpoint-every", "20000"])
        assert code == EXIT_OK
        values = [float(r["ssv"]) for r in read_csv(out / "ssv.csv")]
        assert values == pytest.approx([1, 2, 3, 4], abs=0.05)
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["summary"]["converged"] is True
        assert manifest["config"]["seed"] == 7
        for name in ("estimate_a.json", "estimate_b.json", "ssv.json", "table_a.bin", "table_b.bin",
                     "convergence.jsonl"):
            assert (out / name).exists()

    def test_rerun_writes_identical_artifacts(self, tmp_path, additive_game_file):
        args = ["--seed", "7", "--workers", "1", "estimate", "--game", additive_game_file,
                "--slices", "1", "2", "3", "4", "--samples", "2000", "--checkpoint-every", "200"]
        first, second = tmp_path / "a", tmp_path / "b"
        assert run(["--out", str(first)] + args) == run(["--out", str(second)] + args)

        names = sorted(p.name for p in first.iterdir() if p.name != "manifest.json")
        assert names == sorted(p.name for p in second.iterdir() if p.name != "manifest.json")
        for name in names:
            assert (first / name).read_bytes() == (second / name).read_bytes(), name

        log = (first / "convergence.jsonl").read_bytes()
        for line in log.decode("utf-8").splitlines():
            assert set(json.loads(line)) == {"samples_per_run", "mae", "threshold", "converged"}
        run(["--out", str(first)] + args)
        assert (first / "convergence.jsonl").read_bytes() == log

    def test_default_slices_scale_with_small_n(self, tmp_path, additive_game_file):
        out = tmp_path / "default"
        code = run(["--out", str(out), "--seed", "3", "estimate", "--game", additive_game_file,
                    "--samples", "4000", "--checkpoint-every", "4000"])
        assert code == EXIT_OK
        ssv = json.loads((out / "ssv.json").read_text(encoding="utf-8"))
        assert ssv["slice_set"] == [1, 2]
        # additive: 1/2 * ((2w - 10) + (4w - 10) / 3)
        assert ssv["values"] == pytest.approx([-5, -10 / 3, -5 / 3, 0], abs=0.25)
        assert ssv["values"] == sorted(ssv["values"])

    def test_zero_count_cells_are_not_a_convergence_failure(self, tmp_path, additive_game_file):
        out = tmp_path / "iid"
        code = run(["--out", str(out), "estimate", "--game", additive_game_file,
                    "--slices", "1", "2", "3", "4", "--mode", "iid", "--samples", "4"])
        assert code == EXIT_CONFIG
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["status"] == "failed"

    def test_not_converged_exit_code(self, tmp_path):
        weights = [100, -100, 80, -80, 60, -60, 40, -40, 20, -20, 10, -10]
        game = write_json(tmp_path / "wide.json", {"family": "additive", "n": 12, "params": {"weights": weights}})
        out = tmp_path / "wide"
        code = run(["--out", str(out), "estimate", "--game", game, "--slices", "6", "--samples", "4"])
        assert code == EXIT_NOT_CONVERGED
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["status"] == "not_converged"
        assert (out / "ssv.csv").exists()

    def test_below_coverage_floor(self, tmp_path, additive_game_file):
        code = run(["--out", str(tmp_path), "estimate", "--game", additive_game_file,
                    "--slices", "1", "2", "--samples", "3"])
        assert code == EXIT_CONFIG

    def test_slice_outside_range(self, tmp_path, additive_game_file):
        code = run(["--out", str(tmp_path), "estimate", "--game", additive_game_file, "--slices", "5"])
        assert code == EXIT_CONFIG

    def test_resume_continues_from_tables(self, tmp_path, additive_game_file):
        out = tmp_path / "resume"
        args = ["--out", str(out), "--seed", "2", "estimate", "--game", additive_game_file,
                "--slices", "1", "2", "3", "4", "--samples", "16"]
        assert run(args) in (EXIT_OK, EXIT_NOT_CONVERGED)
        first = json.loads((out / "ssv.json").read_text(encoding="utf-8"))
        assert load_table(out / "table_a.bin").samples_drawn == 16

        assert run(args + ["--resume"]) in (EXIT_OK, EXIT_NOT_CONVERGED)
        second = json.loads((out / "ssv.json").read_text(encoding="utf-8"))
        assert second["values"] == first["values"]
        assert second["oracle_evaluations"] == 0

    def test_cache_journal_written(self, tmp_path, additive_game_file):
        out = tmp_path / "cached"
        run(["--out", str(out), "estimate", "--game", additive_game_file,
             "--slices", "1", "2", "3", "4", "--samples", "200", "--cache"])
        lines = (out / "cache.jsonl").read_text(encoding="utf-8").splitlines()
        assert 0 < len(lines) <= 16


class TestAllocate:
    def test_worked_example(self, tmp_path, scores_file):
        out = tmp_path / "plan"
        code = run(["--out", str(out), "allocate", "--scores", scores_file,
                    "--budget", "100", "--window", "8", "--alpha", "1"])
        assert code == EXIT_OK
        assert [int(r["c"]) for r in read_csv(out / "plan.csv")] == [55, 41, 28, 8]
        assert json.loads((out / "plan.json").read_text(encoding="utf-8"))["c"] == [55, 41, 28, 8]

    def test_alpha_sweep_with_game(self, tmp_path, scores_file):
        game = write_json(tmp_path / "g.json",
                          {"family": "additive", "n": 4, "params": {"weights": [0.5, 0.3, 0.1, -0.2]}})
        out = tmp_path / "sweep"
        code = run(["--out", str(out), "allocate", "--scores", scores_file, "--budget", "100",
                    "--alphas", "0", "1", "2", "--game", game])
        assert code == EXIT_OK
        sweep = json.loads((out / "sweep.json").read_text(encoding="utf-8"))
        assert sweep["best_alpha"] == 1
        for alpha in (0, 1, 2):
            assert (out / f"plan-alpha-{alpha}.csv").exists()

    def test_alpha_grid_skips_large_alpha(self, tmp_path, scores_file):
        out = tmp_path / "grid"
        assert run(["--out", str(out), "allocate", "--scores", scores_file, "--budget", "10",
                    "--alpha-grid"]) == EXIT_OK
        assert (out / "plan-alpha-1.csv").exists()
        assert not (out / "plan-alpha-5.csv").exists()

    def test_alpha_out_of_range(self, tmp_path, scores_file):
        assert run(["--out", str(tmp_path), "allocate", "--scores", scores_file,
                    "--budget", "10", "--alpha", "4"]) == EXIT_CONFIG


class TestEvict:
    def test_plan_applied_to_tensor_file(self, tmp_path, scores_file):
        plan_dir = tmp_path / "plan"
        assert run(["--out", str(plan_dir), "allocate", "--scores", scores_file,
                    "--budget", "40", "--window", "8", "--alpha", "1"]) == EXIT_OK
        tensors = write_tensor_file(tmp_path / "heads.bin", random_bundles(seed=3, heads=4, m=64, s=8, d_h=8))
        out = tmp_path / "ev"
        code = run(["--out", str(out), "evict", "--tensor-file", str(tensors),
                    "--plan", str(plan_dir / "plan.json"), "--kernel", "3"])
        assert code == EXIT_OK
        report = json.loads((out / "eviction.json").read_text(encoding="utf-8"))
        plan = json.loads((plan_dir / "plan.json").read_text(encoding="utf-8"))
        assert [h["retained_rows"] for h in report["heads"]] == plan["c"]
        assert all(0.0 < h["retained_mass"] <= 1.0 for h in report["heads"])

    def test_retained_caches_written(self, tmp_path, scores_file):
        plan_dir = tmp_path / "plan"
        assert run(["--out", str(plan_dir), "allocate", "--scores", scores_file,
                    "--budget", "40", "--window", "8", "--alpha", "1"]) == EXIT_OK
        tensors = write_tensor_file(tmp_path / "heads.bin", random_bundles(seed=5, heads=4, m=64, s=8, d_h=8))
        out = tmp_path / "ev"
        assert run(["--out", str(out), "evict", "--tensor-file", str(tensors),
                    "--plan", str(plan_dir / "plan.json")]) == EXIT_OK

        plan = json.loads((plan_dir / "plan.json").read_text(encoding="utf-8"))
        report = json.loads((out / "eviction.json").read_text(encoding="utf-8"))
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert str(out / "retained.bin") in manifest["artifacts"]

        header, caches = read_retained_file(out / "retained.bin")
        assert header.rows == plan["c"]
        _, bundles = read_tensor_file(tensors)
        for bundle, head, (k_hat, v_hat) in zip(bundles, report["heads"], caches):
            indices = head["retained_prefix_indices"]
            assert np.array_equal(k_hat, np.concatenate([bundle.k_out[indices], bundle.k_win]))
            assert np.array_equal(v_hat, np.concatenate([bundle.v_out[indices], bundle.v_win]))

    def test_bad_tensor_file(self, tmp_path, scores_file):
        assert run(["--out", str(tmp_path / "plan"), "allocate", "--scores", scores_file,
                    "--budget", "4"]) == EXIT_OK
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"garbage")
        code = run(["--out", str(tmp_path / "ev"), "evict", "--tensor-file", str(bad),
                    "--plan", str(tmp_path / "plan" / "plan.json")])
        assert code == EXIT_CONFIG


class TestMaskExperiment:
    SCORES = [0.2, 0.0, -0.2, 0.15, 0.0, 0.1, -0.15, 0.0]

    def _scores(self, tmp_path):
        return write_json(tmp_path / "scores.json", {"values": self.SCORES})

    def test_low_masking_beats_top_masking(self, tmp_path, saboteur_game_file):
        out = tmp_path / "mask"
        code = run(["--out", str(out), "mask-experiment", "--game", saboteur_game_file,
                    "--scores", self._scores(tmp_path), "--ks", "1", "2", "3"])
        assert code == EXIT_OK
        report = MaskExperimentReport.from_json(out / "mask_experiment.json")
        assert report.baseline == pytest.approx(0.6)
        for k in (1, 2, 3):
            assert report.utility_at(k, "low") >= report.baseline
            assert report.utility_at(k, "top") < report.utility_at(k, "low")
        assert report.utility_at(3, "low") == pytest.approx(0.95)

        restored = MaskExperimentReport.from_csv(out / "mask_experiment.csv")
        assert restored.baseline == report.baseline
        assert restored.rows == report.rows

    def test_estimated_scores_rank_saboteurs_last(self, tmp_path, saboteur_game_file):
        est = tmp_path / "est"
        assert run(["--out", str(est), "--seed", "11", "estimate", "--game", saboteur_game_file,
                    "--samples", "4000", "--checkpoint-every", "4000"]) == EXIT_OK
        out = tmp_path / "mask"
        code = run(["--out", str(out), "mask-experiment", "--game", saboteur_game_file,
                    "--scores", str(est / "ssv.json"), "--ks", "1", "2", "3"])
        assert code == EXIT_OK
        report = MaskExperimentReport.from_json(out / "mask_experiment.json")
        for k in (1, 2, 3):
            assert report.utility_at(k, "top") < report.baseline < report.utility_at(k, "low")
        assert report.utility_at(3, "top") == pytest.approx(0.15)
        assert report.utility_at(3, "low") == pytest.approx(0.95)

    def test_k_at_least_n_rejected(self, tmp_path, saboteur_game_file):
        code = run(["--out", str(tmp_path), "mask-experiment", "--game", saboteur_game_file,
                    "--scores", self._scores(tmp_path), "--ks", "8"])
        assert code == EXIT_CONFIG


class TestReports:
    def test_convergence_report(self, tmp_path, additive_game_file):
        est = tmp_path / "est"
        run(["--out", str(est), "estimate", "--game", additive_game_file,
             "--slices", "1", "2", "3", "4", "--samples", "1000", "--checkpoint-every", "100"])
        out = tmp_path / "report"
        code = run(["--out", str(out), "convergence-report", "--log", str(est / "convergence.jsonl")])
        assert code == EXIT_OK
        rows = read_csv(out / "convergence.csv")
        assert rows
        assert [int(r["samples_per_run"]) for r in rows] == sorted(int(r["samples_per_run"]) for r in rows)
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["summary"]["checkpoints"] == len(rows)

    def test_exact(self, tmp_path, additive_game_file):
        out = tmp_path / "exact"
        code = run(["--out", str(out), "exact", "--game", additive_game_file, "--slices", "2", "--rational"])
        assert code == EXIT_OK
        assert [float(r["shapley"]) for r in read_csv(out / "shapley.csv")] == [1.0, 2.0, 3.0, 4.0]
        assert len(read_csv(out / "ssv.csv")) == 4

    def test_missing_game_file(self, tmp_path):
        code = run(["--out", str(tmp_path), "exact", "--game", str(tmp_path / "nope.json")])
        assert code == EXIT_CONFIG


class TestConfig:
    def test_flags_override_file(self, tmp_path):
        path = write_json(tmp_path / "run.json", {"seed": 5, "budget": 10, "window": 4})
        config = load_run_config(path, {"seed": 9, "window": None})
        assert (config.seed, config.budget, config.window) == (9, 10, 4)

    def test_unknown_key_rejected(self, tmp_path):
        path = write_json(tmp_path / "run.json", {"sede": 5})
        with pytest.raises(ConfigurationError, match="sede"):
            load_run_config(path)

    @pytest.mark.parametrize("error, code", [
        (CapabilityError("x"), EXIT_CONFIG),
        (TableFormatError("x"), EXIT_CONFIG),
        (EstimateError("x"), EXIT_CONFIG),
        (NotConvergedError(0.3, 0.25, 100), EXIT_NOT_CONVERGED),
        (MalformedReplyError("x"), 4),
        (VerificationError("x"), EXIT_VERIFICATION),
        (RuntimeError("x"), 1),
    ])
    def test_exit_codes(self, error, code):
        assert exit_code_for(error) == code
