import json
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

import app
import harness.runner as runner
from dso.errors import ReachabilityError
from harness.config import ExperimentConfig
from harness.optimizers import Adam, GradientDescent, make_optimizer
from harness.problems import split_seed
from harness.runner import (CURVE_FIELDS, ZLEARN_FIELDS, run_equivcheck, run_gradcheck, run_optimize,
                            run_zlearn)
from utils.file_utils import read_csv, read_json, read_z_table


def _config(out_dir, problem=None, **algorithm):
    data = {
        "name": "test",
        "problem": problem or {"kind": "softmax-tabular", "variant": "canonical", "setting": "first-exit"},
        "algorithm": {"method": "exact-gd", "iterations": 200, "step_size": 0.5, **algorithm},
        "output": {"out_dir": str(out_dir)},
    }
    return ExperimentConfig.from_dict(data)


def _write(tmp_path, name, config: ExperimentConfig):
    path = tmp_path / name
    path.write_text(json.dumps(config.to_dict()))
    return str(path)


class TestGradCheck:
    def test_canonical_passes(self, tmp_path):
        report = run_gradcheck(_config(tmp_path))
        assert report["passed"]
        assert_allclose(report["analytic"], [1.0, -1.0])
        assert report["objective"] == pytest.approx(2.0)
        assert read_json(tmp_path / "report.json")["passed"] is True

    def test_injected_fault_is_located(self, tmp_path):
        def bump(g):
            g[0] += 1e-3
            return g

        report = run_gradcheck(_config(tmp_path), perturb=bump)
        assert not report["passed"]
        assert report["failing_coordinates"] == [0]
        assert report["worst_coordinate"] == 0
        assert report["form_agreement"] < 1e-12

    def test_myopic_episodic(self, tmp_path):
        problem = {"kind": "softmax-tabular", "variant": "canonical", "setting": "episodic", "gamma": 0.0}
        report = run_gradcheck(_config(tmp_path, problem))
        assert report["passed"]
        assert report["objective"] == pytest.approx(1.0)
        assert_allclose(report["analytic"], 0.0, atol=1e-15)

    @pytest.mark.parametrize("setting", ["first-exit", "episodic", "average"])
    def test_random_problems(self, tmp_path, setting):
        problem = {"kind": "smdp-random", "variant": "random", "setting": setting, "seed": 4}
        assert run_gradcheck(_config(tmp_path, problem))["passed"]


class TestOptimize:
    def test_exact_gradient_descent(self, tmp_path):
        result = run_optimize(_config(tmp_path))
        J = [row["J"] for row in result.curve]
        assert len(J) == 201
        assert J[0] == pytest.approx(2.0)
        assert all(b <= a for a, b in zip(J, J[1:]))
        assert J[-1] < 1.1
        rows = read_csv(tmp_path / "curve.csv")
        assert list(rows[0]) == CURVE_FIELDS
        assert all(row["wall_ms"] == "0" for row in rows)
        saved = read_json(tmp_path / "theta.json")
        assert_allclose(saved["theta"], result.theta)

    def test_zero_iterations(self, tmp_path):
        result = run_optimize(_config(tmp_path, iterations=0))
        assert len(result.curve) == 1
        assert result.curve[0]["iter"] == 0
        assert_allclose(result.theta, 0.0)

    def test_reruns_are_byte_identical(self, tmp_path):
        problem = {"kind": "softmax-tabular", "variant": "canonical", "setting": "first-exit", "seed": 3}
        first = run_optimize(_config(tmp_path / "a", problem, method="alg1-sgd", iterations=5, batch_size=64))
        second = run_optimize(_config(tmp_path / "b", problem, method="alg1-sgd", iterations=5, batch_size=64))
        assert (tmp_path / "a" / "curve.csv").read_bytes() == (tmp_path / "b" / "curve.csv").read_bytes()
        assert_allclose(first.theta, second.theta, rtol=0, atol=0)
        assert first.curve[-1]["steps"] > 0

    def test_seed_changes_sampled_run(self, tmp_path):
        problem = {"kind": "softmax-tabular", "variant": "canonical", "setting": "first-exit", "seed": 1}
        a = run_optimize(_config(tmp_path / "a", problem, method="alg1-sgd", iterations=2, batch_size=32))
        problem["seed"] = 2
        b = run_optimize(_config(tmp_path / "b", problem, method="alg1-sgd", iterations=2, batch_size=32))
        assert not np.array_equal(a.theta, b.theta)

    def test_chain_iteration_decreases(self, tmp_path):
        result = run_optimize(_config(tmp_path, method="chain-iteration", iterations=3, inner_iters=20))
        J = [row["J"] for row in result.curve]
        assert J[-1] < J[0]

    def test_kappa_restored_after_accepted_step(self, tmp_path, monkeypatch):
        used = []
        outcomes = iter([True, True, False, False])

        def scripted_step(problem, theta, config, surrogate_factory=None):
            used.append(config.kappa)
            rejected = next(outcomes)
            return theta, SimpleNamespace(rejected=rejected, kappa=0.5 * config.kappa if rejected else config.kappa)

        monkeypatch.setattr(runner, "chain_iteration_step", scripted_step)
        run_optimize(_config(tmp_path, method="chain-iteration", iterations=4, kappa=0.8))
        assert used == pytest.approx([0.8, 0.4, 0.2, 0.8])

    def test_pco_on_random_smdp(self, tmp_path):
        problem = {"kind": "smdp-random", "variant": "random", "setting": "first-exit", "seed": 1}
        result = run_optimize(_config(tmp_path, problem, method="pco", iterations=3, batch_size=64,
                                      inner_iters=10, step_size=0.1))
        assert len(result.curve) == 4
        assert all(np.isfinite(row["J"]) for row in result.curve)

    def test_natural_gradient_on_gaussian_problem(self, tmp_path):
        problem = {"kind": "gaussian-linear", "setting": "episodic", "gamma": 0.9, "state_dim": 1}
        result = run_optimize(_config(tmp_path, problem, method="natural", iterations=2, batch_size=64,
                                      step_size=0.05, termination="geometric", horizon_cap=200,
                                      value_features="quadratic", damping=1e-3))
        assert len(result.curve) == 3
        assert all(row["J_stderr"] > 0 for row in result.curve)

    def test_rollout_dump(self, tmp_path):
        config = ExperimentConfig.from_dict({
            "problem": {"kind": "softmax-tabular", "variant": "canonical", "setting": "first-exit"},
            "algorithm": {"method": "alg1-sgd", "iterations": 1, "batch_size": 8},
            "output": {"out_dir": str(tmp_path), "rollouts": "rollouts.jsonl"},
        })
        result = run_optimize(config)
        assert len((tmp_path / "rollouts.jsonl").read_text().splitlines()) == 8
        assert "rollouts" in result.paths


class TestEquivalence:
    @pytest.mark.parametrize("pair", ["smdp-dmdp", "lmdp-dmdp"])
    @pytest.mark.parametrize("seed", range(3))
    def test_pairs_agree(self, pair, seed):
        report = run_equivcheck(pair, seed)
        assert report["passed"], report

    def test_single_action(self, tmp_path):
        report = run_equivcheck("smdp-dmdp", 0, n_states=4, n_actions=1, out_dir=str(tmp_path))
        assert report["passed"]
        assert read_json(tmp_path / "report.json")["pair"] == "smdp-dmdp"


class TestZLearnRun:
    def test_outputs(self, tmp_path):
        config = ExperimentConfig.from_dict({
            "problem": {"kind": "gridworld-lmdp", "size": 3, "setting": "first-exit", "step_cost": 0.1},
            "algorithm": {"method": "zlearn-greedy", "zlearn_steps": 5000, "record_every": 1000},
            "output": {"out_dir": str(tmp_path)},
        })
        result = run_zlearn(config)
        rows = read_csv(tmp_path / "curve.csv")
        assert list(rows[0]) == ZLEARN_FIELDS
        assert [int(row["step"]) for row in rows] == [0, 1000, 2000, 3000, 4000, 5000]
        assert_allclose(read_z_table(tmp_path / "z_table.txt"), result.energies)
        report = read_json(tmp_path / "report.json")
        assert report["final_rel_error"] == pytest.approx(result.rel_error)
        assert report["exact_residual"] < 1e-12
        assert result.rel_error < float(rows[0]["rel_error"])

    def test_optimize_dispatches_to_zlearn(self, tmp_path):
        config = ExperimentConfig.from_dict({
            "problem": {"kind": "gridworld-lmdp", "size": 2, "setting": "episodic", "gamma": 0.9},
            "algorithm": {"method": "zlearn-baseline", "zlearn_steps": 200, "record_every": 100},
            "output": {"out_dir": str(tmp_path)},
        })
        assert len(run_optimize(config).curve) == 3


class TestCli:
    def test_grad_check_exit_code(self, tmp_path):
        path = _write(tmp_path, "gc.json", _config(tmp_path / "ignored"))
        assert app.main(["grad-check", "--config", path, "--out", str(tmp_path / "gc")]) == 0
        assert (tmp_path / "gc" / "report.json").exists()

    def test_optimize_with_overrides(self, tmp_path):
        path = _write(tmp_path, "opt.json", _config(tmp_path / "ignored", iterations=3))
        out = tmp_path / "opt"
        assert app.main(["optimize", "--config", path, "--out", str(out), "--seed", "5", "--threads", "2"]) == 0
        assert len(read_csv(out / "curve.csv")) == 4

    def test_equiv_exit_code(self, tmp_path):
        assert app.main(["equiv", "--pair", "lmdp-dmdp", "--seed", "1", "--out", str(tmp_path)]) == 0
        assert read_json(tmp_path / "report.json")["passed"] is True

    def test_missing_config(self, tmp_path):
        assert app.main(["optimize", "--config", str(tmp_path / "nope.json")]) == 2

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"problem": {"kind": "softmax-tabular"},
                                    "algorithm": {"method": "exact-gd", "step_size": -1}}))
        assert app.main(["optimize", "--config", str(path)]) == 2

    def test_bad_log_level(self, tmp_path):
        path = _write(tmp_path, "gc.json", _config(tmp_path))
        assert app.main(["--log-level", "chatty", "grad-check", "--config", path]) == 2

    def test_runtime_failure(self, tmp_path, monkeypatch):
        def fail(config):
            raise ReachabilityError("states [0] never reach the terminal set")

        monkeypatch.setattr(app, "run_optimize", fail)
        path = _write(tmp_path, "opt.json", _config(tmp_path))
        assert app.main(["optimize", "--config", path]) == 3

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            app.main(["train"])


class TestOptimizers:
    def test_gradient_descent(self):
        assert_allclose(GradientDescent(0.5).step(np.ones(2), np.array([2.0, -2.0])), [0.0, 2.0])

    def test_adam_first_step_is_signed_step(self):
        theta = Adam(0.1).step(np.zeros(2), np.array([3.0, -0.01]))
        assert_allclose(theta, [-0.1, 0.1], rtol=1e-5)

    def test_unknown_optimizer(self):
        with pytest.raises(ValueError):
            make_optimizer("lbfgs", 0.1)


def test_seed_streams_are_distinct():
    structure, theta = split_seed(0)
    assert not np.allclose(structure.random(3), theta.random(3))
    again, _ = split_seed(0)
    assert_allclose(split_seed(0)[0].random(3), again.random(3))
