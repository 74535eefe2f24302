import numpy as np
import pytest
from numpy.testing import assert_allclose

from dso.chains import make_softmax_chain
from dso.costs import ActionTable
from dso.errors import CapabilityError, DivergenceUndefinedError
from dso.exact import (cost_vector, exact_gradient, exact_gradient_bottleneck, objective, solve_value_average,
                       solve_value_episodic)
from dso.finite_difference import central_difference_gradient, fd_gradient_oracle, relative_error
from dso.mdp import (LmdpSpec, TabularMdp, build_dmdp_from_smdp, build_dmdp_lmdp_pair, dpg_gradient_oracle,
                     evaluate_mdp_policy, lmdp_policy_gradient_oracle, map_gmdp, map_hmdp, map_lmdp, map_rmdp,
                     map_smdp, mdp_view, smdp_policy_gradient_oracle)
from dso.policies import LogitTransitions, SoftmaxPolicy
from dso.problem import Average, EpisodicDiscounted, FirstExit, InitialDistribution
from dso.zlearn import make_z_chain, one_hot_features
from harness.config import ProblemSpec
from harness.problems import gridworld_lmdp, random_lmdp_dmdp_instance, random_smdp_problem, random_tabular_mdp


def _smdp(setting, seed=0, n_states=6, n_actions=3):
    spec = ProblemSpec(kind="smdp-random", variant="random", setting=setting, n_states=n_states,
                       n_actions=n_actions, gamma=0.9, seed=seed)
    problem, mdp, policy = random_smdp_problem(spec, np.random.default_rng(seed))
    theta = np.random.default_rng(100 + seed).normal(size=problem.n_params)
    return problem, mdp, policy, theta


def _first_exit_p0(n):
    w = np.ones(n)
    w[-1] = 0.0
    return InitialDistribution.tabular(w / w.sum())


def _dense_lmdp(seed, n=4):
    rng = np.random.default_rng(seed)
    baseline = rng.uniform(0.2, 1.0, (n, n))
    baseline /= baseline.sum(axis=1, keepdims=True)
    spec = LmdpSpec(baseline, rng.uniform(0.0, 1.0, n))
    chain = make_softmax_chain(n, {x: list(range(n)) for x in range(n)})
    return spec, chain


def _policy_value(problem, theta, setting, terminal=()):
    p, ell, probs = mdp_view(problem, theta)
    return evaluate_mdp_policy(p, ell, probs, setting, terminal)


class TestMappings:
    def test_deterministic_policy_selects_action_rows(self):
        mdp = random_tabular_mdp(np.random.default_rng(1), 4, 3)
        policy = SoftmaxPolicy(4, 3)
        theta = np.zeros(policy.n_params)
        for x in range(4):
            theta[policy.param_index(x)[x % 3]] = 800.0
        problem = map_gmdp(mdp, policy, ActionTable(mdp.r, policy.n_params), EpisodicDiscounted(0.9),
                           InitialDistribution.uniform(4))
        P = problem.chain.matrix(theta)
        for x in range(4):
            assert_allclose(P[x], mdp.p[x, x % 3])

    def test_identical_actions_give_base_chain(self):
        rng = np.random.default_rng(2)
        row = rng.dirichlet(np.ones(3), size=3)
        mdp = TabularMdp(np.repeat(row[:, None, :], 2, axis=1), rng.uniform(size=(3, 2)))
        policy = SoftmaxPolicy(3, 2)
        problem = map_smdp(mdp, policy, EpisodicDiscounted(0.9), InitialDistribution.uniform(3))
        assert_allclose(problem.chain.matrix(np.zeros(policy.n_params)), row, atol=1e-15)

    @pytest.mark.parametrize("setting", ["first-exit", "episodic", "average"])
    @pytest.mark.parametrize("kind", ["s", "h", "r"])
    def test_policy_evaluation_matches_chain_values(self, setting, kind):
        base, mdp, policy, theta = _smdp(setting, seed=3)
        if kind == "h":
            problem = map_hmdp(mdp, policy, base.setting, base.p0)
        elif kind == "r":
            old = policy.prob_matrix(np.random.default_rng(9).normal(size=policy.n_params))
            problem = map_rmdp(mdp, policy, old, base.setting, base.p0)
        else:
            problem = base
        evaluation = _policy_value(problem, theta, problem.setting, mdp.terminal)
        if setting == "average":
            pair = solve_value_average(problem, theta)
            assert evaluation.average_cost == pytest.approx(pair.J, abs=1e-10)
            assert_allclose(evaluation.values, pair.V.values, atol=1e-10)
        else:
            assert_allclose(evaluation.values, solve_value_episodic(problem, theta).values, atol=1e-10)

    def test_lmdp_policy_evaluation(self):
        spec = gridworld_lmdp(3, step_cost=0.2)
        chain = make_z_chain(spec, one_hot_features(spec))
        setting = FirstExit(spec.terminal)
        problem = map_lmdp(spec, chain, setting, InitialDistribution.uniform(spec.n_states))
        theta = np.random.default_rng(4).normal(size=problem.n_params)
        evaluation = _policy_value(problem, theta, setting, spec.terminal)
        assert_allclose(evaluation.values, solve_value_episodic(problem, theta).values, atol=1e-10)

    def test_entropy_vanishes_for_deterministic_policy(self):
        _, mdp, policy, _ = _smdp("first-exit", seed=5)
        theta = np.zeros(policy.n_params)
        for x in range(mdp.n_states - 1):
            theta[policy.param_index(x)[0]] = 800.0
        setting, p0 = FirstExit(mdp.terminal), _first_exit_p0(mdp.n_states)
        s_cost = map_smdp(mdp, policy, setting, p0).cost.value_table(theta, mdp.n_states)
        h_cost = map_hmdp(mdp, policy, setting, p0).cost.value_table(theta, mdp.n_states)
        assert_allclose(h_cost, s_cost, atol=1e-12)

    def test_proximal_term_vanishes_at_old_policy(self):
        _, mdp, policy, theta = _smdp("first-exit", seed=6)
        setting, p0 = FirstExit(mdp.terminal), _first_exit_p0(mdp.n_states)
        s_problem = map_smdp(mdp, policy, setting, p0)
        r_problem = map_rmdp(mdp, policy, policy.prob_matrix(theta), setting, p0)
        assert_allclose(r_problem.cost.value_table(theta, mdp.n_states),
                        s_problem.cost.value_table(theta, mdp.n_states), atol=1e-12)
        assert np.array_equal(r_problem.chain.matrix(theta), s_problem.chain.matrix(theta))

    def test_proximal_term_needs_support(self):
        _, mdp, policy, _ = _smdp("first-exit", seed=7)
        setting, p0 = FirstExit(mdp.terminal), _first_exit_p0(mdp.n_states)
        old = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
        problem = map_rmdp(mdp, policy, old, setting, p0)
        theta = np.zeros(policy.n_params)
        theta[policy.param_index(0)[0]] = 800.0
        with pytest.raises(DivergenceUndefinedError):
            problem.cost.value(0, theta)

    def test_costs_differ_only_by_state_terms(self):
        _, mdp, policy, theta = _smdp("episodic", seed=8)
        setting, p0 = EpisodicDiscounted(0.9), InitialDistribution.uniform(mdp.n_states)
        s_problem = map_smdp(mdp, policy, setting, p0)
        h_problem = map_hmdp(mdp, policy, setting, p0)
        assert np.array_equal(h_problem.chain.matrix(theta), s_problem.chain.matrix(theta))
        diff = h_problem.cost.value_table(theta, mdp.n_states) - s_problem.cost.value_table(theta, mdp.n_states)
        probs = policy.prob_matrix(theta)
        assert_allclose(diff, -np.sum(probs * np.log(probs), axis=1), atol=1e-12)


class TestLmdpMapping:
    def test_cost_is_state_cost_at_baseline(self):
        spec = gridworld_lmdp(3, step_cost=0.1)
        chain = make_z_chain(spec, one_hot_features(spec))
        problem = map_lmdp(spec, chain, FirstExit(spec.terminal), InitialDistribution.uniform(spec.n_states))
        assert_allclose(cost_vector(problem, np.zeros(problem.n_params)), spec.cost, atol=1e-12)

    def test_cost_dominates_state_cost_and_gradient(self):
        spec, chain = _dense_lmdp(1)
        problem = map_lmdp(spec, chain, Average(), InitialDistribution.uniform(4))
        rng = np.random.default_rng(2)
        for _ in range(10):
            theta = rng.normal(size=problem.n_params)
            assert np.all(cost_vector(problem, theta) >= spec.cost - 1e-15)
            x = int(rng.integers(4))
            fd = central_difference_gradient(lambda th: problem.cost.value(x, th), theta)
            assert_allclose(problem.cost.grad(x, theta), fd, atol=1e-8)

    def test_support_violation(self):
        spec, chain = _dense_lmdp(3)
        baseline = spec.baseline.copy()
        baseline[0] = [0.0, 0.5, 0.5, 0.0]
        with pytest.raises(DivergenceUndefinedError):
            map_lmdp(LmdpSpec(baseline, spec.cost), chain, Average(), InitialDistribution.uniform(4))


class TestEquivalencePairs:
    @pytest.mark.parametrize("seed", range(10))
    def test_smdp_to_dmdp(self, seed):
        _, mdp, policy, theta = _smdp("first-exit", seed=seed)
        setting, p0 = FirstExit(mdp.terminal), _first_exit_p0(mdp.n_states)
        s_problem = map_smdp(mdp, policy, setting, p0)
        _, d_problem = build_dmdp_from_smdp(mdp, policy, setting, p0)
        n = mdp.n_states
        assert np.max(np.abs(s_problem.chain.matrix(theta) - d_problem.chain.matrix(theta))) < 1e-12
        assert np.max(np.abs(s_problem.cost.value_table(theta, n) - d_problem.cost.value_table(theta, n))) < 1e-12
        assert_allclose(exact_gradient(d_problem, theta), exact_gradient(s_problem, theta), atol=1e-10)

    def test_single_action(self):
        _, mdp, policy, theta = _smdp("first-exit", seed=4, n_actions=1)
        setting, p0 = FirstExit(mdp.terminal), _first_exit_p0(mdp.n_states)
        _, d_problem = build_dmdp_from_smdp(mdp, policy, setting, p0)
        assert_allclose(d_problem.chain.matrix(theta), mdp.p[:, 0], atol=1e-15)
        assert objective(d_problem, theta) == pytest.approx(objective(map_smdp(mdp, policy, setting, p0), theta))
        assert_allclose(exact_gradient(d_problem, theta), 0.0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_dmdp_to_lmdp(self, seed):
        rng = np.random.default_rng(seed)
        transitions, policy, baseline, cost, terminal = random_lmdp_dmdp_instance(rng)
        setting, p0 = FirstExit(terminal), _first_exit_p0(6)
        d_problem, l_problem = build_dmdp_lmdp_pair(transitions, policy, baseline, cost, terminal, setting, p0)
        theta = rng.normal(size=d_problem.n_params)
        assert np.max(np.abs(d_problem.cost.value_table(theta, 6) - l_problem.cost.value_table(theta, 6))) < 1e-12
        assert_allclose(exact_gradient(l_problem, theta), exact_gradient(d_problem, theta), atol=1e-10)

    def test_baseline_transitions_reduce_to_state_cost(self):
        rng = np.random.default_rng(5)
        _, policy, baseline, cost, terminal = random_lmdp_dmdp_instance(rng)
        logits = np.where(baseline > 0, np.log(np.where(baseline > 0, baseline, 1.0)), -np.inf)
        flat = LogitTransitions(logits, np.zeros((6, policy.n_eta, 6)))
        setting, p0 = FirstExit(terminal), _first_exit_p0(6)
        d_problem, l_problem = build_dmdp_lmdp_pair(flat, policy, baseline, cost, terminal, setting, p0)
        theta = rng.normal(size=d_problem.n_params)
        assert_allclose(d_problem.cost.value_table(theta, 6), cost, atol=1e-12)
        assert_allclose(l_problem.cost.value_table(theta, 6), cost, atol=1e-12)


class TestGradientOracles:
    @pytest.mark.parametrize("setting", ["first-exit", "episodic", "average"])
    @pytest.mark.parametrize("seed", range(10))
    def test_classical_policy_gradient(self, setting, seed):
        problem, mdp, policy, theta = _smdp(setting, seed=seed)
        oracle = smdp_policy_gradient_oracle(mdp, policy, theta, problem.setting, problem.p0)
        assert_allclose(oracle, exact_gradient(problem, theta), atol=1e-10)

    def test_classical_policy_gradient_against_finite_differences(self):
        problem, mdp, policy, theta = _smdp("episodic", seed=11)
        oracle = smdp_policy_gradient_oracle(mdp, policy, theta, problem.setting, problem.p0)
        assert np.max(relative_error(oracle, fd_gradient_oracle(problem, theta))) < 1e-6

    def test_policy_irrelevant_when_actions_agree(self):
        rng = np.random.default_rng(12)
        row = rng.dirichlet(np.ones(4), size=4)
        mdp = TabularMdp(np.repeat(row[:, None, :], 3, axis=1), np.repeat(rng.uniform(size=(4, 1)), 3, axis=1))
        policy = SoftmaxPolicy(4, 3)
        theta = rng.normal(size=policy.n_params)
        setting = EpisodicDiscounted(0.9)
        oracle = smdp_policy_gradient_oracle(mdp, policy, theta, setting, InitialDistribution.uniform(4))
        assert_allclose(oracle, 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_deterministic_policy_gradient(self, seed):
        rng = np.random.default_rng(seed)
        transitions, policy, baseline, cost, terminal = random_lmdp_dmdp_instance(rng)
        setting, p0 = FirstExit(terminal), _first_exit_p0(6)
        d_problem, _ = build_dmdp_lmdp_pair(transitions, policy, baseline, cost, terminal, setting, p0)
        theta = rng.normal(size=d_problem.n_params)
        oracle = dpg_gradient_oracle(d_problem, theta)
        assert_allclose(oracle, exact_gradient_bottleneck(d_problem, theta), atol=1e-10)
        assert_allclose(oracle, exact_gradient(d_problem, theta), atol=1e-10)

    def test_deterministic_policy_gradient_needs_construction(self):
        problem, _, _, theta = _smdp("first-exit")
        with pytest.raises(CapabilityError):
            dpg_gradient_oracle(problem, theta)

    @pytest.mark.parametrize("seed", range(10))
    def test_lmdp_policy_gradient(self, seed):
        spec, chain = _dense_lmdp(seed)
        problem = map_lmdp(spec, chain, Average(), InitialDistribution.uniform(4))
        theta = np.random.default_rng(seed).normal(size=problem.n_params)
        assert_allclose(lmdp_policy_gradient_oracle(problem, theta), exact_gradient(problem, theta), atol=1e-10)

    def test_lmdp_policy_gradient_vanishes_at_baseline(self):
        spec, chain = _dense_lmdp(4)
        spec = LmdpSpec(spec.baseline, np.full(4, 0.3))
        problem = map_lmdp(spec, chain, Average(), InitialDistribution.uniform(4))
        theta = np.zeros(problem.n_params)
        for x in range(4):
            theta[chain.param_index(x)] = np.log(spec.baseline[x])
        assert_allclose(lmdp_policy_gradient_oracle(problem, theta), 0.0, atol=1e-10)

    def test_lmdp_oracle_needs_average_lmdp(self):
        spec = gridworld_lmdp(2)
        chain = make_z_chain(spec, one_hot_features(spec))
        problem = map_lmdp(spec, chain, FirstExit(spec.terminal), InitialDistribution.uniform(spec.n_states))
        with pytest.raises(CapabilityError):
            lmdp_policy_gradient_oracle(problem, np.zeros(problem.n_params))
