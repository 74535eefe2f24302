"""
Step costs L(x, theta) and their combinators.

Every cost supplies an analytic gradient; second derivatives are optional and
advertised through `twice_differentiable`. Tabular callers should prefer the
`*_table` methods, which evaluate all states at once.
"""

import abc
import logging
from typing import Iterable, Optional, Sequence

import numpy as np

from dso.errors import CapabilityError, DivergenceUndefinedError, InvalidStructureError

logger = logging.getLogger(__name__)


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Elementwise ln(p/q) where p > 0 and 0 elsewhere (0 ln 0 = 0)."""
    out = np.zeros_like(p)
    pos = p > 0
    if np.any(q[pos] <= 0):
        raise DivergenceUndefinedError("divergence undefined: support not contained in reference")
    out[pos] = np.log(p[pos] / q[pos])
    return out


class CostModel(abc.ABC):
    """Interface every cost implements."""

    differentiable = True
    twice_differentiable = False
    time_varying = False

    def __init__(self, n_params: int):
        self.n_params = int(n_params)

    @abc.abstractmethod
    def value(self, x, theta: np.ndarray, t: int = 0) -> float:
        ...

    @abc.abstractmethod
    def grad(self, x, theta: np.ndarray, t: int = 0) -> np.ndarray:
        ...

    def hess(self, x, theta: np.ndarray, t: int = 0) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} has no second derivatives")

    def value_table(self, theta, n_states: int, t: int = 0) -> np.ndarray:
        return np.array([self.value(x, theta, t) for x in range(n_states)])

    def grad_table(self, theta, n_states: int, t: int = 0) -> np.ndarray:
        return np.array([self.grad(x, theta, t) for x in range(n_states)]).reshape(n_states, self.n_params)

    def hess_table(self, theta, n_states: int, t: int = 0) -> np.ndarray:
        return np.array([self.hess(x, theta, t) for x in range(n_states)]).reshape(
            n_states, self.n_params, self.n_params)


class TableCost(CostModel):
    """Fixed state cost r(x); parameter independent."""

    twice_differentiable = True

    def __init__(self, values: Sequence[float], n_params: int):
        super().__init__(n_params)
        self.values = np.asarray(values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise InvalidStructureError("state costs must be finite")

    def value(self, x, theta, t=0):
        return float(self.values[x])

    def grad(self, x, theta, t=0):
        return np.zeros(self.n_params)

    def hess(self, x, theta, t=0):
        return np.zeros((self.n_params, self.n_params))

    def value_table(self, theta, n_states, t=0):
        return self.values[:n_states].copy()


class QuadraticCost(CostModel):
    """L(x,theta) = base[x] + 0.5 * scale[x] * (theta - center)^T M (theta - center)."""

    twice_differentiable = True

    def __init__(self, base: Sequence[float], scale: Sequence[float], center: Sequence[float],
                 metric: Optional[np.ndarray] = None):
        center = np.asarray(center, dtype=float)
        super().__init__(center.size)
        self.base = np.asarray(base, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        self.center = center
        self.metric = np.eye(center.size) if metric is None else np.asarray(metric, dtype=float)
        if not np.allclose(self.metric, self.metric.T):
            raise InvalidStructureError("quadratic metric must be symmetric")

    def value(self, x, theta, t=0):
        d = theta - self.center
        return float(self.base[x] + 0.5 * self.scale[x] * d @ self.metric @ d)

    def grad(self, x, theta, t=0):
        return self.scale[x] * (self.metric @ (theta - self.center))

    def hess(self, x, theta, t=0):
        return self.scale[x] * self.metric


class LinearQuadraticCost(CostModel):
    """0.5 x^T Q x + 0.5 mu^T R mu for continuous states, mu from a linear policy."""

    twice_differentiable = True

    def __init__(self, Q, R, policy):
        super().__init__(policy.n_params)
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        self.policy = policy

    def value(self, x, theta, t=0):
        x = np.asarray(x, dtype=float)
        u = self.policy.mu(x, theta)
        return float(0.5 * x @ self.Q @ x + 0.5 * u @ self.R @ u)

    def grad(self, x, theta, t=0):
        J = self.policy.jacobian(x, theta)
        return J.T @ (self.R @ self.policy.mu(x, theta))

    def hess(self, x, theta, t=0):
        J = self.policy.jacobian(x, theta)
        return J.T @ self.R @ J


class SumCost(CostModel):
    """Weighted sum of costs sharing one parameter vector."""

    def __init__(self, parts: Sequence[CostModel], weights: Sequence[float]):
        if not parts or len(parts) != len(weights):
            raise InvalidStructureError("need one weight per part and at least one part")
        n = parts[0].n_params
        if any(p.n_params != n for p in parts):
            raise InvalidStructureError("all parts must share the parameter count")
        if not np.all(np.isfinite(weights)):
            raise InvalidStructureError("weights must be finite")
        super().__init__(n)
        self.parts = list(parts)
        self.weights = [float(w) for w in weights]
        self.twice_differentiable = all(p.twice_differentiable for p in parts)
        self.time_varying = any(p.time_varying for p in parts)

    def value(self, x, theta, t=0):
        return sum(w * p.value(x, theta, t) for p, w in zip(self.parts, self.weights))

    def grad(self, x, theta, t=0):
        return sum(w * p.grad(x, theta, t) for p, w in zip(self.parts, self.weights))

    def hess(self, x, theta, t=0):
        return sum(w * p.hess(x, theta, t) for p, w in zip(self.parts, self.weights))

    def value_table(self, theta, n_states, t=0):
        return sum(w * p.value_table(theta, n_states, t) for p, w in zip(self.parts, self.weights))

    def grad_table(self, theta, n_states, t=0):
        return sum(w * p.grad_table(theta, n_states, t) for p, w in zip(self.parts, self.weights))

    def hess_table(self, theta, n_states, t=0):
        return sum(w * p.hess_table(theta, n_states, t) for p, w in zip(self.parts, self.weights))


def cost_sum(parts: Sequence[CostModel], weights: Sequence[float]) -> SumCost:
    return SumCost(parts, weights)


class TimeVaryingCost(CostModel):
    """L_t dispatched on the time index; L_0 .. L_T."""

    time_varying = True

    def __init__(self, steps: Sequence[CostModel]):
        if not steps:
            raise InvalidStructureError("time-varying cost needs at least one step")
        n = steps[0].n_params
        if any(c.n_params != n for c in steps):
            raise InvalidStructureError("all steps must share the parameter count")
        super().__init__(n)
        self.steps = list(steps)
        self.twice_differentiable = all(c.twice_differentiable for c in steps)

    def _at(self, t):
        if not 0 <= t < len(self.steps):
            raise InvalidStructureError(f"no cost defined at time {t}")
        return self.steps[t]

    def value(self, x, theta, t=0):
        return self._at(t).value(x, theta)

    def grad(self, x, theta, t=0):
        return self._at(t).grad(x, theta)

    def hess(self, x, theta, t=0):
        return self._at(t).hess(x, theta)

    def value_table(self, theta, n_states, t=0):
        return self._at(t).value_table(theta, n_states)

    def grad_table(self, theta, n_states, t=0):
        return self._at(t).grad_table(theta, n_states)

    def hess_table(self, theta, n_states, t=0):
        return self._at(t).hess_table(theta, n_states)


class _TabularChainCost(CostModel):
    """Costs computed row-wise from a tabular chain; per-state calls use the tables."""

    def __init__(self, chain):
        if not chain.tabular:
            raise CapabilityError("KL costs need a tabular chain")
        super().__init__(chain.n_params)
        self.chain = chain
        self.twice_differentiable = bool(chain.twice_differentiable)
        self.time_varying = bool(chain.time_varying)

    def value(self, x, theta, t=0):
        return float(self.value_table(theta, self.chain.n_states, t)[x])

    def grad(self, x, theta, t=0):
        return self.grad_table(theta, self.chain.n_states, t)[x]

    def hess(self, x, theta, t=0):
        return self.hess_table(theta, self.chain.n_states, t)[x]


class KlToFixedCost(_TabularChainCost):
    """KL(P(.|x,theta) || pbar(.|x))."""

    def __init__(self, chain, baseline: np.ndarray):
        super().__init__(chain)
        self.baseline = np.asarray(baseline, dtype=float)
        if self.baseline.shape != (chain.n_states, chain.n_states):
            raise InvalidStructureError("baseline shape does not match the chain")
        outside = chain.support_mask() & (self.baseline <= 0)
        if np.any(outside):
            x, y = np.argwhere(outside)[0]
            raise DivergenceUndefinedError(
                f"chain support leaves baseline support at transition {x}->{y}")

    def value_table(self, theta, n_states, t=0):
        P = self.chain.matrix(theta, t)
        return np.sum(P * _xlogy_ratio(P, self.baseline), axis=1)

    def grad_table(self, theta, n_states, t=0):
        P = self.chain.matrix(theta, t)
        D = self.chain.prob_gradient_tensor(theta, t)
        return np.einsum("xyk,xy->xk", D, _xlogy_ratio(P, self.baseline))

    def hess_table(self, theta, n_states, t=0):
        P = self.chain.matrix(theta, t)
        S = self.chain.score_tensor(theta, t)
        Hl = self.chain.log_hessian_tensor(theta, t)
        ratio = _xlogy_ratio(P, self.baseline)
        ss = np.einsum("xyi,xyj->xyij", S, S)
        inner = (ss + Hl) * ratio[:, :, None, None] + ss
        return np.einsum("xy,xyij->xij", P, inner)


def cost_kl_to_fixed(chain, baseline: np.ndarray) -> KlToFixedCost:
    return KlToFixedCost(chain, baseline)


class KlFromFixedCost(_TabularChainCost):
    """KL(reference(.|x) || P(.|x,theta)); a proximal pull toward a frozen chain."""

    def __init__(self, chain, reference: np.ndarray):
        super().__init__(chain)
        self.reference = np.asarray(reference, dtype=float)
        outside = (self.reference > 0) & ~chain.support_mask()
        if np.any(outside):
            x, y = np.argwhere(outside)[0]
            raise DivergenceUndefinedError(
                f"reference support leaves chain support at transition {x}->{y}")

    def value_table(self, theta, n_states, t=0):
        P = self.chain.matrix(theta, t)
        return np.sum(self.reference * _xlogy_ratio(self.reference, P), axis=1)

    def grad_table(self, theta, n_states, t=0):
        S = self.chain.score_tensor(theta, t)
        return -np.einsum("xy,xyk->xk", self.reference, S)

    def hess_table(self, theta, n_states, t=0):
        Hl = self.chain.log_hessian_tensor(theta, t)
        return -np.einsum("xy,xyij->xij", self.reference, Hl)


def cost_kl_from_fixed(chain, reference: np.ndarray) -> KlFromFixedCost:
    return KlFromFixedCost(chain, reference)


class PolicyEntropyCost(CostModel):
    """H[pi(.|x,theta)], zero at the policy's terminal states."""

    twice_differentiable = True

    def __init__(self, policy):
        super().__init__(policy.n_params)
        self.policy = policy

    def _parts(self, x, theta):
        p = self.policy.probs(x, theta)
        logp = np.zeros_like(p)
        logp[p > 0] = np.log(p[p > 0])
        return p, logp

    def value(self, x, theta, t=0):
        if x in self.policy.terminal:
            return 0.0
        p, logp = self._parts(x, theta)
        return float(-np.sum(p * logp))

    def grad(self, x, theta, t=0):
        if x in self.policy.terminal:
            return np.zeros(self.n_params)
        p, logp = self._parts(x, theta)
        return -(p * logp) @ self.policy.scores(x, theta)

    def hess(self, x, theta, t=0):
        if x in self.policy.terminal:
            return np.zeros((self.n_params, self.n_params))
        p, logp = self._parts(x, theta)
        S = self.policy.scores(x, theta)
        H = self.policy.log_hessian(x, theta)
        out = np.zeros((self.n_params, self.n_params))
        for a in range(p.size):
            ss = np.outer(S[a], S[a])
            out -= p[a] * ((ss + H) * logp[a] + ss)
        return out


def cost_policy_entropy(policy) -> PolicyEntropyCost:
    return PolicyEntropyCost(policy)


class PolicyKlCost(CostModel):
    """KL(pi_old(.|x) || pi(.|x,theta)), zero at terminal states."""

    twice_differentiable = True

    def __init__(self, policy, old_probs: np.ndarray):
        super().__init__(policy.n_params)
        self.policy = policy
        self.old = np.asarray(old_probs, dtype=float)

    def _log_ratio(self, x, theta):
        return _xlogy_ratio(self.old[x], self.policy.probs(x, theta))

    def value(self, x, theta, t=0):
        if x in self.policy.terminal:
            return 0.0
        return float(np.sum(self.old[x] * self._log_ratio(x, theta)))

    def grad(self, x, theta, t=0):
        if x in self.policy.terminal:
            return np.zeros(self.n_params)
        return -self.old[x] @ self.policy.scores(x, theta)

    def hess(self, x, theta, t=0):
        if x in self.policy.terminal:
            return np.zeros((self.n_params, self.n_params))
        return -self.old[x].sum() * self.policy.log_hessian(x, theta)


class ActionTable:
    """Parameter-independent action cost table r[x, a]."""

    twice_differentiable = True

    def __init__(self, r: np.ndarray, n_params: int):
        self.r = np.asarray(r, dtype=float)
        self.n_params = int(n_params)

    def values(self, x, theta):
        return self.r[x].copy()

    def grads(self, x, theta):
        return np.zeros((self.r.shape[1], self.n_params))

    def hessians(self, x, theta):
        return np.zeros((self.r.shape[1], self.n_params, self.n_params))


class PolicyAveragedCost(CostModel):
    """L(x,theta) = sum_a pi(a|x,theta) l(x,a,theta)."""

    twice_differentiable = True

    def __init__(self, policy, action_cost):
        if action_cost.n_params != policy.n_params:
            raise InvalidStructureError("action cost and policy disagree on the parameter count")
        super().__init__(policy.n_params)
        self.policy = policy
        self.action_cost = action_cost

    def value(self, x, theta, t=0):
        return float(self.policy.probs(x, theta) @ self.action_cost.values(x, theta))

    def grad(self, x, theta, t=0):
        p = self.policy.probs(x, theta)
        S = self.policy.scores(x, theta)
        ell = self.action_cost.values(x, theta)
        return (p * ell) @ S + p @ self.action_cost.grads(x, theta)

    def hess(self, x, theta, t=0):
        p = self.policy.probs(x, theta)
        S = self.policy.scores(x, theta)
        H = self.policy.log_hessian(x, theta)
        ell = self.action_cost.values(x, theta)
        G = self.action_cost.grads(x, theta)
        Hl = self.action_cost.hessians(x, theta)
        out = np.zeros((self.n_params, self.n_params))
        for a in range(p.size):
            ss = np.outer(S[a], S[a])
            out += p[a] * ((ss + H) * ell[a] + np.outer(S[a], G[a]) + np.outer(G[a], S[a]) + Hl[a])
        return out


class MixtureEtaCost:
    """Ltilde(x, eta) = eta . r[x]."""

    def __init__(self, r: np.ndarray):
        self.r = np.asarray(r, dtype=float)

    def value(self, x, eta):
        return float(eta @ self.r[x])

    def grad(self, x, eta):
        return self.r[x].copy()


class KlEtaCost:
    """Ltilde(x, eta) = r_L(x) + KL(Ptilde(.|x,eta) || pbar(.|x))."""

    def __init__(self, transitions, baseline: np.ndarray, state_cost: np.ndarray):
        self.transitions = transitions
        self.baseline = np.asarray(baseline, dtype=float)
        self.state_cost = np.asarray(state_cost, dtype=float)
        outside = transitions.support_mask() & (self.baseline <= 0)
        if np.any(outside):
            x, y = np.argwhere(outside)[0]
            raise DivergenceUndefinedError(
                f"transition support leaves baseline support at transition {x}->{y}")

    def value(self, x, eta):
        p = self.transitions.row(x, eta)
        return float(self.state_cost[x] + p @ _xlogy_ratio(p, self.baseline[x]))

    def grad(self, x, eta):
        p = self.transitions.row(x, eta)
        return self.transitions.row_grad(x, eta) @ _xlogy_ratio(p, self.baseline[x])


class BottleneckCost(CostModel):
    """L(x,theta) = Ltilde(x, mu(x,theta)); zero at terminal states."""

    def __init__(self, policy, eta_cost, terminal: Iterable[int] = ()):
        super().__init__(policy.n_params)
        self.policy = policy
        self.eta_cost = eta_cost
        self.terminal = frozenset(int(s) for s in terminal)

    @property
    def bottleneck(self):
        return self

    def value(self, x, theta, t=0):
        if x in self.terminal:
            return 0.0
        return self.eta_cost.value(x, self.policy.mu(x, theta))

    def grad(self, x, theta, t=0):
        if x in self.terminal:
            return np.zeros(self.n_params)
        eta = self.policy.mu(x, theta)
        return self.policy.jacobian(x, theta).T @ self.eta_cost.grad(x, eta)
