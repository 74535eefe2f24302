"""
Surrogate objectives with frozen densities and values.

`ExactSurrogate` perturbs the cost and transition law around theta while
holding the weighting density and the value table fixed; its gradient at
alpha = 0 is the exact objective gradient. `SampledSurrogate` is the batch
version built from importance ratios, and `ClippedSurrogate` adds ratio
clipping for proximal chain optimization. `chain_iteration_step` minimizes a
surrogate over alpha and moves theta along the result.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from dso.costs import KlFromFixedCost
from dso.errors import CapabilityError, InvalidStructureError, RegularizationRequiredError
from dso.estimators import ValueApprox, step_terms
from dso.exact import (cost_gradients, cost_vector, forward_densities, masked_prob_gradients,
                       propagation_matrix, solve_value_timevarying, terminal_mask,
                       transition_matrix, weighting)
from dso.finite_difference import GRADIENT_STEP
from dso.natural import damped_solve
from dso.problem import DsoProblem, TimeVarying
from dso.rollouts import FrozenModel, RolloutBatch

logger = logging.getLogger(__name__)

LOG_RATIO_CAP = 30.0
ARMIJO_SLOPE = 1e-4
MAX_BACKTRACKS = 40
DIVERGENCE_PATIENCE = 5


def _require_second_derivatives(problem: DsoProblem) -> None:
    if not (problem.chain.twice_differentiable and problem.cost.twice_differentiable):
        raise CapabilityError("surrogate Hessian needs second derivatives of chain and cost")


@dataclass
class _Block:
    weights: np.ndarray
    t: int
    values: Optional[np.ndarray]
    gamma: float
    masked: bool


class ExactSurrogate:
    """S(theta, alpha) = sum_x w(x) [L(x, theta+alpha) + gamma sum_x' P(x'|x, theta+alpha) V(x')]."""

    def __init__(self, problem: DsoProblem, theta):
        if not problem.is_tabular:
            raise CapabilityError("exact surrogate needs a tabular chain")
        self.problem = problem
        self.theta = problem.check_theta(theta).copy()
        self.n_params = problem.n_params
        if isinstance(problem.setting, TimeVarying):
            T = problem.setting.horizon
            V = solve_value_timevarying(problem, self.theta).values
            mu = forward_densities(problem, self.theta)
            self._blocks = [_Block(mu[t], t, V[t + 1], 1.0, False) for t in range(T)]
            self._blocks.append(_Block(mu[T], T, None, 1.0, False))
        else:
            w, V, gamma = weighting(problem, self.theta)
            self._blocks = [_Block(w, 0, V, gamma, True)]
        self._mask = terminal_mask(problem)

    def _at(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float).reshape(self.n_params)
        return self.theta + alpha

    def value(self, alpha) -> float:
        th = self._at(alpha)
        total = 0.0
        for b in self._blocks:
            total += float(b.weights @ cost_vector(self.problem, th, b.t))
            if b.values is not None:
                P = (propagation_matrix(self.problem, th, b.t) if b.masked
                     else transition_matrix(self.problem, th, b.t))
                total += b.gamma * float(b.weights @ (P @ b.values))
        return total

    def grad(self, alpha) -> np.ndarray:
        th = self._at(alpha)
        g = np.zeros(self.n_params)
        for b in self._blocks:
            g += b.weights @ cost_gradients(self.problem, th, b.t)
            if b.values is not None:
                D = masked_prob_gradients(self.problem, th, b.t, "direct")
                g += b.gamma * np.einsum("x,xyk,y->k", b.weights, D, b.values)
        return g

    def hess(self, alpha) -> np.ndarray:
        _require_second_derivatives(self.problem)
        th = self._at(alpha)
        chain = self.problem.chain
        H = np.zeros((self.n_params, self.n_params))
        for b in self._blocks:
            H += np.einsum("x,xij->ij", b.weights,
                           self.problem.cost.hess_table(th, chain.n_states, b.t))
            if b.values is None:
                continue
            P = chain.matrix(th, b.t)
            P[self._mask] = 0.0
            S = chain.score_tensor(th, b.t)
            Hl = chain.log_hessian_tensor(th, b.t)
            wPV = b.weights[:, None] * P * b.values[None, :]
            H += b.gamma * (np.einsum("xy,xyi,xyj->ij", wPV, S, S)
                            + np.einsum("xy,xyij->ij", wPV, Hl))
        return H


class SampledSurrogate:
    """Importance-ratio surrogate over a frozen rollout batch.

    value(alpha) = (1/N) sum_n sum_t g^t [L(x_t, theta+alpha) + g r_t(alpha) A_t]
    with r_t the transition likelihood ratio and A_t = R_{t+1} - b(x_t).
    """

    def __init__(self, problem: DsoProblem, theta, batch: RolloutBatch,
                 baseline: Optional[ValueApprox] = None, kl_penalty: float = 0.0):
        self.problem = problem
        self.theta = problem.check_theta(theta).copy()
        self.n_params = problem.n_params
        self.gamma = batch.discount
        self.kl_penalty = float(kl_penalty)
        terms = step_terms(problem, self.theta, batch, baseline)
        base = FrozenModel(problem, self.theta)
        N = len(terms)
        states, s_t, s_w = [], [], []
        tr_x, tr_y, tr_t, tr_w, tr_adv, tr_logp = [], [], [], [], [], []
        for r, term in zip(batch.rollouts, terms):
            for t, x in enumerate(r.states):
                w = self.gamma ** t / N
                states.append(x)
                s_t.append(t)
                s_w.append(w)
                if t < r.n_transitions:
                    y = r.states[t + 1]
                    tr_x.append(x)
                    tr_y.append(y)
                    tr_t.append(t)
                    tr_w.append(w)
                    tr_adv.append(term.advantages[t])
                    tr_logp.append(base.log_prob(x, y, t))
        self._states, self._state_t, self._state_w = states, s_t, np.array(s_w)
        self._tr_x, self._tr_y, self._tr_t = tr_x, tr_y, tr_t
        self._tr_w = np.array(tr_w)
        self._adv = np.array(tr_adv)
        self._base_logp = np.array(tr_logp)
        self._kl: Optional[KlFromFixedCost] = None
        if self.kl_penalty > 0:
            if not problem.is_tabular or isinstance(problem.setting, TimeVarying):
                raise CapabilityError("proximal KL term needs a stationary tabular chain")
            self._kl = KlFromFixedCost(problem.chain, problem.chain.matrix(self.theta))
            self._kl_w = np.zeros(problem.chain.n_states)
            np.add.at(self._kl_w, np.array(tr_x, dtype=int), self._tr_w)
        self._cache: Dict[bytes, FrozenModel] = {}

    @property
    def n_transitions(self) -> int:
        return self._adv.size

    def _model(self, alpha) -> FrozenModel:
        th = self.theta + np.asarray(alpha, dtype=float).reshape(self.n_params)
        key = th.tobytes()
        if key not in self._cache:
            self._cache.clear()
            self._cache[key] = FrozenModel(self.problem, th)
        return self._cache[key]

    def ratios(self, alpha):
        """(ratios, capped) with log-ratios clipped at LOG_RATIO_CAP."""
        m = self._model(alpha)
        logp = np.array([m.log_prob(x, y, t)
                         for x, y, t in zip(self._tr_x, self._tr_y, self._tr_t)])
        log_ratio = logp - self._base_logp
        capped = log_ratio > LOG_RATIO_CAP
        if np.any(capped):
            logger.warning("clipped %d importance log-ratios at %.0f", int(capped.sum()),
                           LOG_RATIO_CAP)
            log_ratio = np.minimum(log_ratio, LOG_RATIO_CAP)
        return np.exp(log_ratio), capped

    def _contributions(self, ratio: np.ndarray) -> np.ndarray:
        return ratio * self._adv

    def _slopes(self, ratio: np.ndarray) -> np.ndarray:
        """d(contribution)/d(log-ratio) per transition."""
        return ratio * self._adv

    def value(self, alpha) -> float:
        m = self._model(alpha)
        total = sum(w * m.cost(x, t) for x, t, w in zip(self._states, self._state_t, self._state_w))
        ratio, _ = self.ratios(alpha)
        total += self.gamma * float(self._tr_w @ self._contributions(ratio))
        if self._kl is not None:
            th = self._model(alpha).theta
            total += self.kl_penalty * float(self._kl_w @ self._kl.value_table(th, self._kl_w.size))
        return float(total)

    def grad(self, alpha) -> np.ndarray:
        m = self._model(alpha)
        g = np.zeros(self.n_params)
        for x, t, w in zip(self._states, self._state_t, self._state_w):
            g += w * m.cost_grad(x, t)
        ratio, capped = self.ratios(alpha)
        slope = np.where(capped, 0.0, self._slopes(ratio)) * self._tr_w
        for k, (x, y, t) in enumerate(zip(self._tr_x, self._tr_y, self._tr_t)):
            if slope[k] != 0.0:
                g += self.gamma * slope[k] * m.score(x, y, t)
        if self._kl is not None:
            th = self._model(alpha).theta
            g += self.kl_penalty * (self._kl_w @ self._kl.grad_table(th, self._kl_w.size))
        return g

    def hess(self, alpha) -> np.ndarray:
        _require_second_derivatives(self.problem)
        m = self._model(alpha)
        H = np.zeros((self.n_params, self.n_params))
        for x, t, w in zip(self._states, self._state_t, self._state_w):
            H += w * m.cost_hess(x, t)
        ratio, capped = self.ratios(alpha)
        slope = np.where(capped, 0.0, self._slopes(ratio)) * self._tr_w
        for k, (x, y, t) in enumerate(zip(self._tr_x, self._tr_y, self._tr_t)):
            if slope[k] != 0.0:
                s = m.score(x, y, t)
                H += self.gamma * slope[k] * (np.outer(s, s) + m.log_hessian(x, y, t))
        if self._kl is not None:
            th = self._model(alpha).theta
            H += self.kl_penalty * np.einsum("x,xij->ij", self._kl_w,
                                             self._kl.hess_table(th, self._kl_w.size))
        return H


class ClippedSurrogate(SampledSurrogate):
    """Each ratio term becomes max(r A, clip(r, 1-eps, 1+eps) A)."""

    def __init__(self, problem: DsoProblem, theta, batch: RolloutBatch,
                 baseline: Optional[ValueApprox] = None, epsilon: float = 0.2,
                 kl_penalty: float = 0.0):
        if not epsilon > 0:
            raise InvalidStructureError(f"clip range must be positive, got {epsilon}")
        super().__init__(problem, theta, batch, baseline, kl_penalty)
        self.epsilon = float(epsilon)

    def _contributions(self, ratio):
        clipped = np.clip(ratio, 1.0 - self.epsilon, 1.0 + self.epsilon)
        return np.maximum(ratio * self._adv, clipped * self._adv)

    def _slopes(self, ratio):
        clipped = np.clip(ratio, 1.0 - self.epsilon, 1.0 + self.epsilon)
        active = ratio * self._adv >= clipped * self._adv
        return np.where(active, ratio * self._adv, 0.0)


def surrogate_exact(problem: DsoProblem, theta) -> ExactSurrogate:
    return ExactSurrogate(problem, theta)


def surrogate_sampled(problem: DsoProblem, theta, batch: RolloutBatch,
                      baseline: Optional[ValueApprox] = None,
                      kl_penalty: float = 0.0) -> SampledSurrogate:
    return SampledSurrogate(problem, theta, batch, baseline, kl_penalty)


def pco_objective(problem: DsoProblem, theta, batch: RolloutBatch,
                  baseline: Optional[ValueApprox] = None, epsilon: float = 0.2,
                  kl_penalty: float = 0.0) -> ClippedSurrogate:
    return ClippedSurrogate(problem, theta, batch, baseline, epsilon, kl_penalty)


def surrogate_hessian(problem: DsoProblem, theta, source: str = "exact",
                      batch: Optional[RolloutBatch] = None,
                      baseline: Optional[ValueApprox] = None) -> np.ndarray:
    """Second derivative of the surrogate in alpha at 0, symmetrized."""
    _require_second_derivatives(problem)
    if source == "exact":
        surrogate = ExactSurrogate(problem, theta)
    elif source == "batch":
        if batch is None:
            raise InvalidStructureError("batch source needs a rollout batch")
        surrogate = SampledSurrogate(problem, theta, batch, baseline)
    else:
        raise ValueError(f"unknown surrogate source {source!r}")
    H = surrogate.hess(np.zeros(problem.n_params))
    return 0.5 * (H + H.T)


def surrogate_cross_derivative(problem: DsoProblem, theta, h: float = GRADIENT_STEP) -> np.ndarray:
    """C[i, j] ~ d^2 S / d theta_i d alpha_j at alpha = 0, by central differences in theta."""
    theta = problem.check_theta(theta)
    n = theta.size
    zero = np.zeros(n)
    C = np.zeros((n, n))
    for i in range(n):
        step = h * (1.0 + abs(theta[i]))
        e = np.zeros(n)
        e[i] = step
        up = ExactSurrogate(problem, theta + e).grad(zero)
        down = ExactSurrogate(problem, theta - e).grad(zero)
        C[i] = (up - down) / (2 * step)
    return C


@dataclass
class InnerOptimizerConfig:
    method: str = "gd"  # "gd" | "newton"
    step: float = 1.0
    tol: float = 1e-8
    max_iters: int = 100
    kappa: float = 1.0
    damping: float = 1e-6


@dataclass
class StepReport:
    alpha: np.ndarray
    inner_iters: int
    converged: bool
    surrogate_start: float
    surrogate_end: float
    grad_norm: float
    kappa: float
    rejected: bool = False
    history: List[float] = field(default_factory=list)


def _newton_direction(surrogate, alpha, g, damping: float) -> np.ndarray:
    H = surrogate.hess(alpha)
    try:
        d, _ = damped_solve(0.5 * (H + H.T), -g, damping)
    except RegularizationRequiredError:
        logger.debug("surrogate Hessian is not positive definite; using the gradient")
        return -g
    if d @ g >= 0:
        return -g
    return d


def minimize_surrogate(surrogate, config: InnerOptimizerConfig) -> StepReport:
    """Descend S over alpha from 0 with backtracking until the gradient is below tol."""
    if config.method not in ("gd", "newton"):
        raise ValueError(f"unknown inner method {config.method!r}")
    n = surrogate.n_params
    alpha = np.zeros(n)
    value = surrogate.value(alpha)
    start = value
    history = [value]
    increases = 0
    g = surrogate.grad(alpha)
    converged = bool(np.max(np.abs(g)) < config.tol)
    it = 0
    while not converged and it < config.max_iters:
        it += 1
        d = _newton_direction(surrogate, alpha, g, config.damping) if config.method == "newton" else -g
        step = config.step
        trial_value = surrogate.value(alpha + step * d)
        for _ in range(MAX_BACKTRACKS):
            if trial_value <= value + ARMIJO_SLOPE * step * (g @ d):
                break
            step *= 0.5
            trial_value = surrogate.value(alpha + step * d)
        increases = increases + 1 if trial_value > value else 0
        alpha = alpha + step * d
        value = trial_value
        history.append(value)
        if increases >= DIVERGENCE_PATIENCE:
            logger.warning("surrogate increased %d steps in a row; rejecting the step", increases)
            return StepReport(np.zeros(n), it, False, start, value, float(np.max(np.abs(g))),
                              0.5 * config.kappa, rejected=True, history=history)
        g = surrogate.grad(alpha)
        converged = bool(np.max(np.abs(g)) < config.tol)
    logger.debug("inner minimization: %d iterations, S %.6g -> %.6g", it, start, value)
    return StepReport(alpha, it, converged, start, value, float(np.max(np.abs(g))),
                      config.kappa, history=history)


def chain_iteration_step(problem: DsoProblem, theta,
                         config: Optional[InnerOptimizerConfig] = None,
                         surrogate_factory: Optional[Callable] = None):
    """theta + kappa * argmin_alpha S(theta, alpha); returns (theta_new, StepReport).

    A rejected step leaves theta unchanged and reports the halved kappa for the
    next call.
    """
    config = config or InnerOptimizerConfig()
    theta = problem.check_theta(theta)
    if not 0.0 <= config.kappa <= 1.0:
        raise InvalidStructureError(f"kappa must lie in [0, 1], got {config.kappa}")
    if config.kappa == 0.0:
        return theta.copy(), StepReport(np.zeros(theta.size), 0, True, 0.0, 0.0, 0.0, 0.0)
    surrogate = surrogate_factory(theta) if surrogate_factory else ExactSurrogate(problem, theta)
    report = minimize_surrogate(surrogate, config)
    if report.rejected:
        return theta.copy(), report
    return theta + config.kappa * report.alpha, report
