"""
Sampled gradient machinery over rollout batches: value fitting, the
backward-recursion gradient estimator with baselines, and path-form gradient
and Hessian estimators for finite-horizon problems.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import scipy.linalg

from dso.errors import (CapabilityError, InvalidStructureError, RegularizationRequiredError,
                        StalenessError)
from dso.problem import DsoProblem, TimeVarying
from dso.rollouts import FrozenModel, RolloutBatch, check_returns

logger = logging.getLogger(__name__)


class OneHotFeatures:
    """Tabular features: phi(x) = e_x."""

    def __init__(self, n_states: int):
        self.dim = int(n_states)

    def __call__(self, x) -> np.ndarray:
        phi = np.zeros(self.dim)
        phi[int(x)] = 1.0
        return phi


class ConstantFeature:
    dim = 1

    def __call__(self, x) -> np.ndarray:
        return np.ones(1)


class FunctionFeatures:
    """Wraps a user feature map returning vectors of length `dim`."""

    def __init__(self, fn: Callable, dim: int):
        self.fn = fn
        self.dim = int(dim)

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.fn(x), dtype=float).reshape(self.dim)


@dataclass
class ValueApprox:
    features: Callable
    weights: np.ndarray
    ridge: float = 0.0

    def predict(self, x) -> float:
        return float(self.features(x) @ self.weights)

    def table(self, n_states: int) -> np.ndarray:
        return np.array([self.predict(x) for x in range(n_states)])


@dataclass
class GradientEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    n: int
    mean_return: float = 0.0
    mean_length: float = 0.0
    valid: bool = True
    samples: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class HessianEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    n: int


def _summarize(samples: np.ndarray):
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    if n > 1:
        stderr = samples.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        stderr = np.zeros_like(mean)
    return mean, stderr


def _require_fresh(batch: RolloutBatch, theta: np.ndarray) -> None:
    if batch.theta.shape != theta.shape or not np.array_equal(batch.theta, theta):
        raise StalenessError("batch was generated under different parameters")
    if not batch.rollouts:
        raise InvalidStructureError("batch has no usable rollouts")


def fit_value_approx(batch: RolloutBatch, features: Callable, ridge: float = 0.0) -> ValueApprox:
    """Discount-weighted ridge regression of returns on features."""
    if not batch.rollouts:
        raise InvalidStructureError("cannot fit a value function to an empty batch")
    dim = features.dim
    A = np.zeros((dim, dim))
    b = np.zeros(dim)
    for r in batch.rollouts:
        if r.returns is None:
            raise InvalidStructureError("rollout returns have not been computed")
        Phi = np.array([features(x) for x in r.states]).reshape(len(r.states), dim)
        w = batch.discount ** np.arange(len(r.states))
        A += Phi.T @ (w[:, None] * Phi)
        b += Phi.T @ (w * r.returns)
    if ridge > 0:
        A += ridge * np.eye(dim)
    elif np.linalg.matrix_rank(A) < dim:
        raise RegularizationRequiredError(
            "feature Gram matrix is rank deficient; supply a positive ridge coefficient")
    weights = scipy.linalg.solve(A, b, assume_a="pos")
    return ValueApprox(features, weights, ridge)


def baseline_values(model: FrozenModel, rollout, value_approx: Optional[ValueApprox],
                    cache: dict) -> np.ndarray:
    """b(x_t, theta) for each transition of a rollout.

    Tabular chains use sum_x' P(x'|x) Vhat(x'); chains with a mean map use
    Vhat(mean(x, theta)).
    """
    T = rollout.n_transitions
    if value_approx is None or T == 0:
        return np.zeros(T)
    problem = model.problem
    if model.tabular:
        if "vhat" not in cache:
            cache["vhat"] = value_approx.table(problem.chain.n_states)
        out = np.zeros(T)
        for t in range(T):
            key = ("b", model.time_index(t))
            if key not in cache:
                cache[key] = model.matrix(t) @ cache["vhat"]
            out[t] = cache[key][rollout.states[t]]
        return out
    if hasattr(problem.chain, "mean"):
        return np.array([value_approx.predict(problem.chain.mean(rollout.states[t], model.theta))
                         for t in range(T)])
    raise CapabilityError("chain offers neither tabular rows nor a mean map for baselines")


@dataclass
class StepTerms:
    """Per-rollout quantities shared by the estimator and the sampled surrogate."""

    cost_grads: np.ndarray  # (T+1, k)
    scores: np.ndarray      # (T, k)
    advantages: np.ndarray  # (T,)  R_{t+1} - b(x_t)


def step_terms(problem: DsoProblem, theta, batch: RolloutBatch,
               baseline: Optional[ValueApprox] = None) -> List[StepTerms]:
    theta = problem.check_theta(theta)
    _require_fresh(batch, theta)
    model = FrozenModel(problem, theta)
    cache: dict = {}
    terms = []
    for r in batch.rollouts:
        check_returns(r, batch.discount)
        grads = np.array([model.cost_grad(x, t) for t, x in enumerate(r.states)])
        b = baseline_values(model, r, baseline, cache)
        terms.append(StepTerms(grads.reshape(r.length, problem.n_params), r.scores,
                               r.returns[1:] - b))
    return terms


def algorithm1_gradient(problem: DsoProblem, theta, batch: RolloutBatch,
                        baseline: Optional[ValueApprox] = None) -> GradientEstimate:
    """Average over rollouts of the backward recursion

    G_t = g G_{t+1} + grad L_t + g * score_t * (R_{t+1} - b_t),  G_T = grad L_T.
    """
    terms = step_terms(problem, theta, batch, baseline)
    gamma = batch.discount
    samples = np.zeros((len(terms), problem.n_params))
    for i, term in enumerate(terms):
        G = term.cost_grads[-1].copy()
        for t in range(term.scores.shape[0] - 1, -1, -1):
            G = gamma * G + term.cost_grads[t] + gamma * term.scores[t] * term.advantages[t]
        samples[i] = G
    mean, stderr = _summarize(samples)
    return GradientEstimate(
        mean, stderr, len(terms),
        mean_return=float(np.mean([r.returns[0] for r in batch.rollouts])),
        mean_length=float(np.mean([r.length for r in batch.rollouts])),
        valid=batch.valid, samples=samples)


def _require_timevarying(problem: DsoProblem) -> None:
    if not isinstance(problem.setting, TimeVarying):
        raise InvalidStructureError("path estimators need a time-varying problem")


def path_gradient_timevarying(problem: DsoProblem, theta, batch: RolloutBatch) -> GradientEstimate:
    """Per path: (sum_t score_t) * total cost + grad of total cost."""
    _require_timevarying(problem)
    theta = problem.check_theta(theta)
    _require_fresh(batch, theta)
    model = FrozenModel(problem, theta)
    samples = np.zeros((batch.size, problem.n_params))
    for i, r in enumerate(batch.rollouts):
        k = r.scores.sum(axis=0)
        total = r.costs.sum()
        grad_total = sum(model.cost_grad(x, t) for t, x in enumerate(r.states))
        samples[i] = k * total + grad_total
    mean, stderr = _summarize(samples)
    return GradientEstimate(mean, stderr, batch.size,
                            mean_return=float(np.mean([r.costs.sum() for r in batch.rollouts])),
                            mean_length=float(np.mean([r.length for r in batch.rollouts])),
                            valid=batch.valid, samples=samples)


def path_hessian_timevarying(problem: DsoProblem, theta, batch: RolloutBatch) -> HessianEstimate:
    """(k k^T + d2K) L + k dL^T + dL k^T + d2L per path, k = sum of scores, L = total cost."""
    _require_timevarying(problem)
    if not (problem.chain.twice_differentiable and problem.cost.twice_differentiable):
        raise CapabilityError("path Hessian needs second derivatives of chain and cost")
    theta = problem.check_theta(theta)
    _require_fresh(batch, theta)
    model = FrozenModel(problem, theta)
    n = problem.n_params
    samples = np.zeros((batch.size, n, n))
    for i, r in enumerate(batch.rollouts):
        k = r.scores.sum(axis=0)
        d2K = np.zeros((n, n))
        for t in range(r.n_transitions):
            d2K += model.log_hessian(r.states[t], r.states[t + 1], t)
        total = r.costs.sum()
        dL = np.zeros(n)
        d2L = np.zeros((n, n))
        for t, x in enumerate(r.states):
            dL += model.cost_grad(x, t)
            d2L += model.cost_hess(x, t)
        samples[i] = (np.outer(k, k) + d2K) * total + np.outer(k, dL) + np.outer(dL, k) + d2L
    mean, stderr = _summarize(samples)
    return HessianEstimate(0.5 * (mean + mean.T), stderr, batch.size)
