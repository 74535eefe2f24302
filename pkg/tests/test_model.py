import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import softmax_problem
from dso.chains import FixedChain, LinearGaussianPolicy, TimeVaryingChain, make_gaussian_chain, make_softmax_chain
from dso.costs import (KlToFixedCost, PolicyEntropyCost, QuadraticCost, TableCost, cost_kl_from_fixed,
                       cost_kl_to_fixed, cost_policy_entropy, cost_sum)
from dso.errors import DivergenceUndefinedError, InvalidStructureError
from dso.exact import objective
from dso.finite_difference import central_difference_gradient, relative_error
from dso.policies import SoftmaxPolicy
from dso.problem import (DsoProblem, EpisodicDiscounted, FirstExit, InitialDistribution, TimeVarying,
                         param_vector)


def _fd_ok(value, grad, theta, tol=1e-6):
    fd = central_difference_gradient(value, theta)
    assert np.max(relative_error(grad(theta), fd)) < tol


def test_softmax_chain_uniform_row_and_score():
    chain = make_softmax_chain(2, {0: [0, 1]}, terminal={1})
    theta = np.zeros(2)
    assert chain.prob(0, 1, theta) == pytest.approx(0.5)
    assert_allclose(chain.score(0, 1, theta), [-0.5, 0.5])
    assert_allclose(chain.score(1, 1, theta), [0.0, 0.0])
    assert chain.prob(1, 1, theta) == 1.0


def test_softmax_exit_probability_increases_with_logit():
    chain = make_softmax_chain(2, {0: [0, 1]}, terminal={1})
    probs = [chain.prob(0, 1, np.array([0.0, t])) for t in (0.0, 1.0, 5.0, 20.0)]
    assert all(a < b for a, b in zip(probs, probs[1:]))
    assert probs[-1] == pytest.approx(1.0, abs=1e-8)


def test_empty_successor_list_rejected():
    with pytest.raises(InvalidStructureError):
        make_softmax_chain(3, {0: [1], 1: []}, terminal={2})


@pytest.mark.parametrize("setting", ["first-exit", "episodic", "average"])
def test_rows_stochastic_and_score_identity(setting):
    problem = softmax_problem(setting, seed=3)
    chain = problem.chain
    draws = np.random.default_rng(7).normal(0.0, 1.0, (100, chain.n_params))
    for theta in draws:
        P = chain.matrix(theta)
        assert np.max(np.abs(P.sum(axis=1) - 1.0)) < 1e-12
        identity = np.einsum("xy,xyk->xk", P, chain.score_tensor(theta))
        assert np.max(np.abs(identity)) < 1e-10


def test_score_tensor_matches_log_prob_differences():
    problem = softmax_problem("first-exit", seed=1)
    chain = problem.chain
    theta = np.random.default_rng(0).normal(size=chain.n_params)
    S = chain.score_tensor(theta)
    for x, y in zip(*np.nonzero(chain.support_mask())):
        fd = central_difference_gradient(lambda th: chain.log_prob(x, y, th), theta)
        assert_allclose(S[x, y], fd, atol=1e-8)


def test_fixed_chain_rejects_non_stochastic_rows():
    with pytest.raises(InvalidStructureError):
        FixedChain(np.array([[0.5, 0.4], [0.0, 1.0]]), 1)


def test_fixed_chain_absorbing_states_are_terminal_by_default():
    P = [[0.5, 0.5], [0.0, 1.0]]
    assert FixedChain(P, 1).terminal == {1}
    assert FixedChain(P, 1, terminal=()).terminal == frozenset()
    cost = TableCost([1.0, 2.0], 1)
    p0 = InitialDistribution.delta(2, 0)
    with pytest.raises(InvalidStructureError, match="explicit terminal set"):
        objective(DsoProblem(FixedChain(P, 1), cost, EpisodicDiscounted(0.5), p0), np.zeros(1))
    trap = DsoProblem(FixedChain(P, 1, terminal=()), cost, EpisodicDiscounted(0.5), p0)
    # V1 = 2 / (1 - 0.5) = 4, V0 = 1 + 0.5 * (0.5 V0 + 0.5 V1)
    assert objective(trap, np.zeros(1)) == pytest.approx(8.0 / 3.0)


def test_time_varying_chain_needs_steps():
    with pytest.raises(InvalidStructureError):
        TimeVaryingChain([])


class TestGaussianChain:
    def _chain(self):
        policy = LinearGaussianPolicy(1, 1, learn_gain=False)
        return make_gaussian_chain([[0.0]], [[1.0]], [[1.0]], policy)

    def test_score_at_mean_is_zero(self):
        chain = self._chain()
        theta = np.array([0.3])
        assert_allclose(chain.score(np.zeros(1), np.array([0.3]), theta), [0.0], atol=1e-15)

    def test_score_is_residual_over_variance(self):
        chain = self._chain()
        assert_allclose(chain.score(np.zeros(1), np.array([1.0]), np.array([0.0])), [1.0])

    def test_sample_mean(self):
        chain = self._chain()
        rng = np.random.default_rng(0)
        theta = np.array([0.3])
        draws = np.array([chain.sample(np.zeros(1), theta, rng)[0] for _ in range(100_000)])
        assert abs(draws.mean() - 0.3) < 4.0 / np.sqrt(draws.size)
        scores = np.array([chain.score(np.zeros(1), np.array([d]), theta)[0] for d in draws[:20_000]])
        assert abs(scores.mean()) < 4.0 * scores.std() / np.sqrt(scores.size)

    def test_non_positive_definite_covariance_rejected(self):
        policy = LinearGaussianPolicy(2, 2)
        with pytest.raises(InvalidStructureError):
            make_gaussian_chain(np.eye(2), np.eye(2), np.array([[1.0, 2.0], [2.0, 1.0]]), policy)

    def test_score_matches_log_prob(self):
        policy = LinearGaussianPolicy(2, 2)
        chain = make_gaussian_chain(0.5 * np.eye(2), np.eye(2), np.array([[0.2, 0.05], [0.05, 0.1]]), policy)
        theta = np.random.default_rng(2).normal(size=policy.n_params)
        x, y = np.array([0.4, -1.0]), np.array([0.1, 0.3])
        fd = central_difference_gradient(lambda th: chain.log_prob(x, y, th), theta)
        assert_allclose(chain.score(x, y, theta), fd, rtol=1e-6, atol=1e-8)


class TestCostSum:
    def _parts(self):
        rng = np.random.default_rng(4)
        k = 3
        a = QuadraticCost(rng.uniform(size=4), rng.uniform(size=4), rng.normal(size=k))
        b = QuadraticCost(rng.uniform(size=4), rng.uniform(size=4), rng.normal(size=k))
        c = TableCost(rng.uniform(size=4), k)
        return a, b, c

    def test_single_part_identity(self):
        a, _, _ = self._parts()
        total = cost_sum([a], [1.0])
        theta = np.array([0.2, -0.1, 0.7])
        for x in range(4):
            assert total.value(x, theta) == a.value(x, theta)
            assert_allclose(total.grad(x, theta), a.grad(x, theta))

    def test_cancellation(self):
        a, _, _ = self._parts()
        total = cost_sum([a, a], [1.0, -1.0])
        theta = np.array([0.2, -0.1, 0.7])
        for x in range(4):
            assert total.value(x, theta) == 0.0
            assert_allclose(total.grad(x, theta), 0.0)

    def test_associative(self):
        a, b, c = self._parts()
        left = cost_sum([cost_sum([a, b], [1.0, 1.0]), c], [1.0, 1.0])
        right = cost_sum([a, cost_sum([b, c], [1.0, 1.0])], [1.0, 1.0])
        theta = np.array([1.0, 0.5, -2.0])
        for x in range(4):
            assert left.value(x, theta) == pytest.approx(right.value(x, theta), abs=1e-12)

    def test_mismatched_parameter_counts(self):
        with pytest.raises(InvalidStructureError):
            cost_sum([TableCost([1.0], 2), TableCost([1.0], 3)], [1.0, 1.0])


class TestKlToFixed:
    def _setup(self):
        chain = make_softmax_chain(3, {0: [0, 1, 2], 1: [0, 1, 2], 2: [1, 2]})
        baseline = np.array([[0.2, 0.5, 0.3], [0.3, 0.3, 0.4], [0.0, 0.6, 0.4]])
        return chain, baseline

    def test_zero_at_baseline(self):
        chain, baseline = self._setup()
        theta = np.zeros(chain.n_params)
        for x in range(3):
            idx = chain.param_index(x)
            theta[idx] = np.log(baseline[x][baseline[x] > 0])
        cost = cost_kl_to_fixed(chain, baseline)
        assert_allclose(cost.value_table(theta, 3), 0.0, atol=1e-14)
        assert_allclose(cost.grad_table(theta, 3), 0.0, atol=1e-14)

    def test_nonnegative_and_gradient(self):
        chain, baseline = self._setup()
        cost = cost_kl_to_fixed(chain, baseline)
        rng = np.random.default_rng(5)
        for _ in range(20):
            theta = rng.normal(size=chain.n_params)
            assert np.all(cost.value_table(theta, 3) >= -1e-15)
            x = int(rng.integers(3))
            _fd_ok(lambda th: cost.value(x, th), lambda th: cost.grad(x, th), theta)

    def test_support_violation(self):
        chain, baseline = self._setup()
        bad = baseline.copy()
        bad[0] = [0.0, 0.5, 0.5]
        with pytest.raises(DivergenceUndefinedError):
            KlToFixedCost(chain, bad)


class TestKlFromFixed:
    def _chain(self):
        return make_softmax_chain(3, {0: [0, 1, 2], 1: [0, 1, 2], 2: [1, 2]})

    def test_zero_at_reference(self):
        chain = self._chain()
        old = np.random.default_rng(7).normal(size=chain.n_params)
        cost = cost_kl_from_fixed(chain, chain.matrix(old))
        assert_allclose(cost.value_table(old, 3), 0.0, atol=1e-14)
        assert_allclose(cost.grad_table(old, 3), 0.0, atol=1e-14)

    def test_gradient_and_hessian(self):
        chain = self._chain()
        rng = np.random.default_rng(8)
        cost = cost_kl_from_fixed(chain, chain.matrix(rng.normal(size=chain.n_params)))
        for _ in range(10):
            theta = rng.normal(size=chain.n_params)
            x = int(rng.integers(3))
            assert cost.value(x, theta) >= -1e-15
            _fd_ok(lambda th: cost.value(x, th), lambda th: cost.grad(x, th), theta)
            fd_h = np.array([central_difference_gradient(lambda th: cost.grad(x, th)[i], theta)
                             for i in range(chain.n_params)])
            assert_allclose(cost.hess(x, theta), fd_h, atol=1e-6)

    def test_reference_outside_support(self):
        chain = self._chain()
        reference = np.array([[0.2, 0.5, 0.3], [0.3, 0.3, 0.4], [0.5, 0.5, 0.0]])
        with pytest.raises(DivergenceUndefinedError):
            cost_kl_from_fixed(chain, reference)


class TestPolicyEntropy:
    def test_uniform_and_deterministic(self):
        policy = SoftmaxPolicy(2, 4)
        cost = cost_policy_entropy(policy)
        theta = np.zeros(policy.n_params)
        assert cost.value(0, theta) == pytest.approx(np.log(4))
        theta[policy.param_index(1)] = [800.0, 0.0, 0.0, 0.0]
        assert cost.value(1, theta) == pytest.approx(0.0, abs=1e-12)

    def test_gradient_and_hessian(self):
        policy = SoftmaxPolicy(3, 3, terminal={2})
        cost = PolicyEntropyCost(policy)
        rng = np.random.default_rng(6)
        for _ in range(20):
            theta = rng.normal(size=policy.n_params)
            x = int(rng.integers(2))
            _fd_ok(lambda th: cost.value(x, th), lambda th: cost.grad(x, th), theta)
            fd_h = np.array([central_difference_gradient(lambda th: cost.grad(x, th)[i], theta)
                             for i in range(policy.n_params)])
            assert_allclose(cost.hess(x, theta), fd_h, atol=1e-7)
        assert cost.value(2, theta) == 0.0


def test_quadratic_cost_gradient_at_random_points():
    rng = np.random.default_rng(8)
    cost = QuadraticCost(rng.uniform(size=5), rng.uniform(size=5), rng.normal(size=4))
    for _ in range(20):
        theta = rng.normal(size=4)
        x = int(rng.integers(5))
        _fd_ok(lambda th: cost.value(x, th), lambda th: cost.grad(x, th), theta)


def test_problem_requires_shared_parameter_count():
    chain = make_softmax_chain(2, {0: [0, 1]}, terminal={1})
    with pytest.raises(InvalidStructureError):
        DsoProblem(chain, TableCost([1.0, 0.0], 3), FirstExit({1}), InitialDistribution.delta(2, 0))


def test_setting_validation():
    with pytest.raises(InvalidStructureError):
        EpisodicDiscounted(1.0)
    with pytest.raises(InvalidStructureError):
        FirstExit(frozenset())
    with pytest.raises(InvalidStructureError):
        TimeVarying(-1)
    assert EpisodicDiscounted(0.0).gamma == 0.0


def test_initial_distribution_validation():
    with pytest.raises(InvalidStructureError):
        InitialDistribution.tabular([0.5, 0.6])
    with pytest.raises(InvalidStructureError):
        InitialDistribution.gaussian([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])
    assert InitialDistribution.uniform(4).weights.sum() == pytest.approx(1.0)


def test_param_vector_rejects_non_finite():
    with pytest.raises(InvalidStructureError):
        param_vector([0.0, np.nan])
    with pytest.raises(InvalidStructureError):
        param_vector([0.0, 1.0], 3)
