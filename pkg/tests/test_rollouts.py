import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import softmax_problem
from dso.errors import InvalidStructureError
from dso.problem import DsoProblem, FirstExit, InitialDistribution
from dso.rollouts import (END_HORIZON_CAP, END_TERMINAL, check_returns, generate_rollouts, rollout_rng)
from harness.config import ProblemSpec
from harness.problems import gaussian_linear_problem, random_timevarying_problem


def test_start_in_terminal_state(canonical):
    problem = DsoProblem(canonical.chain, canonical.cost, FirstExit({1}), InitialDistribution.delta(2, 1))
    batch = generate_rollouts(problem, np.zeros(2), 20)
    assert all(r.length == 1 and r.end_reason == END_TERMINAL for r in batch.rollouts)
    assert all(r.returns[0] == 0.0 for r in batch.rollouts)


def test_canonical_mean_return(canonical):
    batch = generate_rollouts(canonical, np.zeros(2), 4000, seed=1)
    returns = np.array([r.returns[0] for r in batch.rollouts])
    assert abs(returns.mean() - 2.0) < 4.0 * returns.std(ddof=1) / np.sqrt(returns.size)
    assert all(r.end_reason == END_TERMINAL and r.states[-1] == 1 for r in batch.rollouts)
    assert batch.n_capped == 0 and batch.valid


def test_geometric_termination_length():
    problem = softmax_problem("episodic", seed=2, gamma=0.9)
    theta = np.zeros(problem.n_params)
    batch = generate_rollouts(problem, theta, 20_000, mode="geometric", seed=3)
    steps = np.array([r.n_transitions for r in batch.rollouts])
    # transitions before the first stop are geometric with mean gamma / (1 - gamma)
    assert abs(steps.mean() - 9.0) < 4.0 * steps.std(ddof=1) / np.sqrt(steps.size)
    assert batch.discount == 1.0


def test_horizon_mode_truncates_without_flagging():
    problem = softmax_problem("episodic", seed=4)
    batch = generate_rollouts(problem, np.zeros(problem.n_params), 50, horizon_cap=5, mode="horizon")
    assert all(r.n_transitions == 5 and r.end_reason == END_HORIZON_CAP for r in batch.rollouts)
    assert batch.n_capped == 0
    assert batch.discount == pytest.approx(0.9)


def test_horizon_cap_is_counted(canonical):
    batch = generate_rollouts(canonical, np.array([10.0, -10.0]), 30, horizon_cap=50)
    assert batch.n_capped == 30
    assert all(r.n_transitions == 50 for r in batch.rollouts)


def test_worker_count_does_not_change_batch():
    problem = softmax_problem("first-exit", seed=5)
    theta = np.random.default_rng(5).normal(size=problem.n_params)
    one = generate_rollouts(problem, theta, 200, seed=11, threads=1)
    four = generate_rollouts(problem, theta, 200, seed=11, threads=4)
    assert one.to_records() == four.to_records()
    other = generate_rollouts(problem, theta, 200, seed=12, threads=1)
    assert one.to_records() != other.to_records()


def test_return_recursion_holds():
    problem = softmax_problem("episodic", seed=6, gamma=0.8)
    batch = generate_rollouts(problem, np.zeros(problem.n_params), 100, horizon_cap=30, mode="horizon")
    for r in batch.rollouts:
        check_returns(r, batch.discount)
        expected = np.sum(0.8 ** np.arange(r.length) * r.costs)
        assert r.returns[0] == pytest.approx(expected, rel=1e-12)


def test_tampered_returns_are_detected(canonical):
    batch = generate_rollouts(canonical, np.zeros(2), 10, seed=2)
    r = batch.rollouts[0]
    r.returns[0] += 1e-9
    with pytest.raises(InvalidStructureError):
        check_returns(r, batch.discount)


def test_jsonl_records(canonical, tmp_path):
    batch = generate_rollouts(canonical, np.zeros(2), 25, seed=9)
    path = tmp_path / "rollouts.jsonl"
    batch.write_jsonl(path)
    records = batch.read_jsonl(path)
    assert records == batch.to_records()
    assert {"seed", "index", "states", "costs", "end_reason"} <= set(records[0])
    assert [rec["index"] for rec in records] == list(range(25))


def test_time_varying_rollouts_run_to_horizon():
    spec = ProblemSpec(kind="timevarying-tabular", variant="random", setting="time-varying", horizon=4,
                       n_states=3, n_actions=2)
    problem = random_timevarying_problem(spec, np.random.default_rng(0))
    batch = generate_rollouts(problem, np.zeros(problem.n_params), 40, mode="terminal")
    assert all(r.length == 5 for r in batch.rollouts)
    assert batch.mode == "horizon"


def test_gaussian_rollouts():
    spec = ProblemSpec(kind="gaussian-linear", setting="episodic", state_dim=2, gamma=0.9)
    problem = gaussian_linear_problem(spec, np.random.default_rng(0))
    batch = generate_rollouts(problem, np.zeros(problem.n_params), 30, mode="geometric", seed=4)
    for r in batch.rollouts:
        assert all(np.shape(x) == (2,) for x in r.states)
        assert r.scores.shape == (r.n_transitions, problem.n_params)
    assert isinstance(batch.to_records()[0]["states"][0], list)


def test_argument_validation(canonical):
    with pytest.raises(InvalidStructureError):
        generate_rollouts(canonical, np.zeros(2), 0)
    with pytest.raises(InvalidStructureError):
        generate_rollouts(canonical, np.zeros(2), 5, mode="forever")


def test_rollout_streams_are_independent():
    a = rollout_rng(7, 0).random(5)
    assert_allclose(a, rollout_rng(7, 0).random(5))
    assert not np.allclose(a, rollout_rng(7, 1).random(5))
