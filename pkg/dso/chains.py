"""
Parameterized Markov chains P(x'|x,theta).

Tabular chains expose whole matrices (`matrix`, `score_tensor`, ...) and derive
the per-transition accessors from them. Continuous chains implement the
per-transition accessors directly. All evaluations are pure in (x, theta, t).
"""

import abc
import logging
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.special import softmax

from dso.errors import CapabilityError, InvalidStructureError

logger = logging.getLogger(__name__)


class ChainModel(abc.ABC):
    """Interface every chain implements."""

    tabular = False
    samplable = True
    differentiable = True
    twice_differentiable = False
    time_varying = False
    n_params: int = 0

    @abc.abstractmethod
    def log_prob(self, x, x_next, theta: np.ndarray, t: int = 0) -> float:
        ...

    def prob(self, x, x_next, theta: np.ndarray, t: int = 0) -> float:
        return float(np.exp(self.log_prob(x, x_next, theta, t)))

    @abc.abstractmethod
    def score(self, x, x_next, theta: np.ndarray, t: int = 0) -> np.ndarray:
        """Gradient of ln P(x_next|x, theta) with respect to theta."""

    def log_hessian(self, x, x_next, theta: np.ndarray, t: int = 0) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} has no second derivatives")

    @abc.abstractmethod
    def sample(self, x, theta: np.ndarray, rng: np.random.Generator, t: int = 0):
        ...


class TabularChain(ChainModel):
    """Finite-state chain; subclasses supply `matrix` and `score_tensor`."""

    tabular = True

    def __init__(self, n_states: int, n_params: int, terminal: Iterable[int] = ()):
        self.n_states = int(n_states)
        self.n_params = int(n_params)
        self.terminal: FrozenSet[int] = frozenset(int(s) for s in terminal)
        for s in self.terminal:
            if not 0 <= s < self.n_states:
                raise InvalidStructureError(f"terminal state {s} out of range")

    @abc.abstractmethod
    def matrix(self, theta: np.ndarray, t: int = 0) -> np.ndarray:
        """Row-stochastic (n, n) transition matrix."""

    @abc.abstractmethod
    def score_tensor(self, theta: np.ndarray, t: int = 0) -> np.ndarray:
        """(n, n, n_params) scores, zero where the transition is impossible."""

    @abc.abstractmethod
    def support_mask(self) -> np.ndarray:
        """Structural support as an (n, n) boolean array."""

    def prob_gradient_tensor(self, theta: np.ndarray, t: int = 0) -> np.ndarray:
        return self.matrix(theta, t)[:, :, None] * self.score_tensor(theta, t)

    def log_hessian_tensor(self, theta: np.ndarray, t: int = 0) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} has no second derivatives")

    def successors(self, x: int) -> List[int]:
        return [int(y) for y in np.flatnonzero(self.support_mask()[x])]

    def prob(self, x, x_next, theta, t=0):
        return float(self.matrix(theta, t)[x, x_next])

    def log_prob(self, x, x_next, theta, t=0):
        p = self.matrix(theta, t)[x, x_next]
        return float(np.log(p)) if p > 0 else -np.inf

    def score(self, x, x_next, theta, t=0):
        return self.score_tensor(theta, t)[x, x_next].copy()

    def log_hessian(self, x, x_next, theta, t=0):
        return self.log_hessian_tensor(theta, t)[x, x_next].copy()

    def sample(self, x, theta, rng, t=0):
        cdf = np.cumsum(self.matrix(theta, t)[x])
        return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), self.n_states - 1)


class SoftmaxChain(TabularChain):
    """One logit per (state, allowed successor); rows are softmax over logits."""

    twice_differentiable = True

    def __init__(self, n_states: int, support: Dict[int, Sequence[int]], terminal: Iterable[int] = ()):
        terminal = frozenset(int(s) for s in terminal)
        self._rows: Dict[int, np.ndarray] = {}
        self._index: Dict[int, np.ndarray] = {}
        offset = 0
        for x in range(n_states):
            if x in terminal:
                continue
            succ = [int(y) for y in support.get(x, ())]
            if not succ:
                raise InvalidStructureError(f"nonterminal state {x} has no successors")
            if len(set(succ)) != len(succ) or min(succ) < 0 or max(succ) >= n_states:
                raise InvalidStructureError(f"bad successor list for state {x}: {succ}")
            self._rows[x] = np.array(succ, dtype=int)
            self._index[x] = np.arange(offset, offset + len(succ))
            offset += len(succ)
        super().__init__(n_states, offset, terminal)
        mask = np.zeros((n_states, n_states), dtype=bool)
        for x, succ in self._rows.items():
            mask[x, succ] = True
        for s in self.terminal:
            mask[s, s] = True
        self._mask = mask

    def param_index(self, x: int) -> np.ndarray:
        """Indices of the logits that belong to row `x`."""
        return self._index[x].copy()

    def support_mask(self):
        return self._mask.copy()

    def _row_probs(self, theta, x):
        return softmax(theta[self._index[x]])

    def matrix(self, theta, t=0):
        P = np.zeros((self.n_states, self.n_states))
        for x, succ in self._rows.items():
            P[x, succ] = self._row_probs(theta, x)
        for s in self.terminal:
            P[s, s] = 1.0
        return P

    def score_tensor(self, theta, t=0):
        S = np.zeros((self.n_states, self.n_states, self.n_params))
        for x, succ in self._rows.items():
            p = self._row_probs(theta, x)
            idx = self._index[x]
            block = np.eye(len(succ)) - p[None, :]
            S[x, succ[:, None], idx[None, :]] = block
        return S

    def prob_gradient_tensor(self, theta, t=0):
        D = np.zeros((self.n_states, self.n_states, self.n_params))
        for x, succ in self._rows.items():
            p = self._row_probs(theta, x)
            idx = self._index[x]
            D[x, succ[:, None], idx[None, :]] = np.diag(p) - np.outer(p, p)
        return D

    def log_hessian_tensor(self, theta, t=0):
        H = np.zeros((self.n_states, self.n_states, self.n_params, self.n_params))
        for x, succ in self._rows.items():
            p = self._row_probs(theta, x)
            idx = self._index[x]
            block = -(np.diag(p) - np.outer(p, p))
            for y in succ:
                H[x, y, idx[:, None], idx[None, :]] = block
        return H


def make_softmax_chain(n_states: int, support: Dict[int, Sequence[int]],
                       terminal: Iterable[int] = ()) -> SoftmaxChain:
    return SoftmaxChain(n_states, support, terminal)


class FixedChain(TabularChain):
    """A parameter-independent tabular chain.

    With `terminal=None` every absorbing state (P[s, s] == 1) is taken as
    terminal, whatever the problem's setting; episodes stop there and the state
    must carry zero cost. Pass `terminal=()` to keep absorbing states as ordinary
    states, e.g. a costly trap under a discounted or average-cost objective.
    """

    twice_differentiable = True

    def __init__(self, matrix: np.ndarray, n_params: int, terminal: Optional[Iterable[int]] = None):
        P = np.array(matrix, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise InvalidStructureError("transition matrix must be square")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise InvalidStructureError("transition matrix is not row-stochastic")
        if terminal is None:
            terminal = [s for s in range(P.shape[0]) if P[s, s] == 1.0]
        super().__init__(P.shape[0], n_params, terminal)
        for s in self.terminal:
            if P[s, s] != 1.0:
                raise InvalidStructureError(f"terminal state {s} is not absorbing")
        self._P = P

    def support_mask(self):
        return self._P > 0

    def matrix(self, theta, t=0):
        return self._P.copy()

    def score_tensor(self, theta, t=0):
        return np.zeros((self.n_states, self.n_states, self.n_params))

    def log_hessian_tensor(self, theta, t=0):
        return np.zeros((self.n_states, self.n_states, self.n_params, self.n_params))


class TimeVaryingChain(TabularChain):
    """Stacks per-step tabular chains P_0 .. P_{T-1} sharing one parameter vector."""

    time_varying = True

    def __init__(self, steps: Sequence[TabularChain]):
        if not steps:
            raise InvalidStructureError("time-varying chain needs at least one step")
        n_states, n_params = steps[0].n_states, steps[0].n_params
        for c in steps:
            if c.n_states != n_states or c.n_params != n_params:
                raise InvalidStructureError("all steps must share states and parameters")
        super().__init__(n_states, n_params, ())
        self.steps = list(steps)
        self.twice_differentiable = all(c.twice_differentiable for c in steps)

    def _at(self, t: int) -> TabularChain:
        if not 0 <= t < len(self.steps):
            raise InvalidStructureError(f"no transition defined at time {t}")
        return self.steps[t]

    def support_mask(self):
        return np.logical_or.reduce([c.support_mask() for c in self.steps])

    def matrix(self, theta, t=0):
        return self._at(t).matrix(theta)

    def score_tensor(self, theta, t=0):
        return self._at(t).score_tensor(theta)

    def prob_gradient_tensor(self, theta, t=0):
        return self._at(t).prob_gradient_tensor(theta)

    def log_hessian_tensor(self, theta, t=0):
        return self._at(t).log_hessian_tensor(theta)


class BottleneckChain(TabularChain):
    """
    P(x'|x,theta) = Ptilde(x'|x, eta) with eta = mu(x,theta).

    `policy` supplies mu and its Jacobian (n_eta, n_params); `transitions`
    supplies Ptilde rows and their eta-gradients (n_eta, n). Terminal rows are
    fixed self-loops.
    """

    def __init__(self, policy, transitions, terminal: Iterable[int] = ()):
        if policy.n_eta != transitions.n_eta:
            raise InvalidStructureError("policy and transitions disagree on the bottleneck size")
        super().__init__(transitions.n_states, policy.n_params, terminal)
        self.policy = policy
        self.transitions = transitions

    @property
    def bottleneck(self):
        return self

    def support_mask(self):
        mask = self.transitions.support_mask().copy()
        for s in self.terminal:
            mask[s] = False
            mask[s, s] = True
        return mask

    def _active(self):
        return [x for x in range(self.n_states) if x not in self.terminal]

    def matrix(self, theta, t=0):
        P = np.zeros((self.n_states, self.n_states))
        for x in self._active():
            P[x] = self.transitions.row(x, self.policy.mu(x, theta))
        for s in self.terminal:
            P[s, s] = 1.0
        return P

    def prob_gradient_tensor(self, theta, t=0):
        D = np.zeros((self.n_states, self.n_states, self.n_params))
        for x in self._active():
            eta = self.policy.mu(x, theta)
            D[x] = self.transitions.row_grad(x, eta).T @ self.policy.jacobian(x, theta)
        return D

    def score_tensor(self, theta, t=0):
        P = self.matrix(theta)
        D = self.prob_gradient_tensor(theta)
        S = np.zeros_like(D)
        pos = P > 0
        S[pos] = D[pos] / P[pos][:, None]
        return S


class LinearGaussianPolicy:
    """mu(x,theta) = K x + k with (K, k) packed row-major into theta."""

    def __init__(self, n_state: int, n_control: int, learn_gain: bool = True,
                 fixed_gain: Optional[np.ndarray] = None):
        self.n_state = int(n_state)
        self.n_control = int(n_control)
        self.learn_gain = bool(learn_gain)
        self.fixed_gain = (np.zeros((n_control, n_state)) if fixed_gain is None
                           else np.asarray(fixed_gain, dtype=float).reshape(n_control, n_state))
        self.n_gain = self.n_control * self.n_state if self.learn_gain else 0
        self.n_params = self.n_gain + self.n_control
        self.n_eta = self.n_control

    def unpack(self, theta):
        K = theta[:self.n_gain].reshape(self.n_control, self.n_state) if self.learn_gain else self.fixed_gain
        return K, theta[self.n_gain:self.n_gain + self.n_control]

    def mu(self, x, theta):
        K, k = self.unpack(theta)
        return K @ np.asarray(x, dtype=float) + k

    def jacobian(self, x, theta):
        J = np.zeros((self.n_control, self.n_params))
        x = np.asarray(x, dtype=float)
        if self.learn_gain:
            for i in range(self.n_control):
                J[i, i * self.n_state:(i + 1) * self.n_state] = x
        J[:, self.n_gain:] = np.eye(self.n_control)
        return J


class GaussianChain(ChainModel):
    """x' ~ Normal(A x + B mu(x,theta), S)."""

    twice_differentiable = True

    def __init__(self, A, B, S, policy: LinearGaussianPolicy):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.S = np.atleast_2d(np.asarray(S, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.S.shape != (n, n):
            raise InvalidStructureError("inconsistent Gaussian chain dimensions")
        if self.B.shape[1] != policy.n_control or policy.n_state != n:
            raise InvalidStructureError("policy dimensions do not match B")
        if not np.allclose(self.S, self.S.T, atol=1e-12):
            raise InvalidStructureError("covariance is not symmetric")
        try:
            self._chol = scipy.linalg.cholesky(self.S, lower=True)
        except np.linalg.LinAlgError as e:
            raise InvalidStructureError(f"covariance is not positive definite: {e}") from e
        self._S_inv = scipy.linalg.cho_solve((self._chol, True), np.eye(n))
        self._log_norm = -0.5 * n * np.log(2 * np.pi) - np.sum(np.log(np.diag(self._chol)))
        self.policy = policy
        self.n_params = policy.n_params
        self.state_dim = n

    @property
    def bottleneck(self):
        return self

    def mean(self, x, theta):
        x = np.asarray(x, dtype=float)
        return self.A @ x + self.B @ self.policy.mu(x, theta)

    def mean_jacobian(self, x, theta):
        """(n_params, state_dim) derivative of the mean."""
        return (self.B @ self.policy.jacobian(x, theta)).T

    def log_prob(self, x, x_next, theta, t=0):
        r = np.asarray(x_next, dtype=float) - self.mean(x, theta)
        z = scipy.linalg.solve_triangular(self._chol, r, lower=True)
        return float(self._log_norm - 0.5 * z @ z)

    def score(self, x, x_next, theta, t=0):
        r = np.asarray(x_next, dtype=float) - self.mean(x, theta)
        return self.mean_jacobian(x, theta) @ (self._S_inv @ r)

    def log_hessian(self, x, x_next, theta, t=0):
        G = self.mean_jacobian(x, theta)
        return -G @ self._S_inv @ G.T

    def sample(self, x, theta, rng, t=0):
        return self.mean(x, theta) + self._chol @ rng.standard_normal(self.state_dim)


def make_gaussian_chain(A, B, S, policy: LinearGaussianPolicy) -> GaussianChain:
    return GaussianChain(A, B, S, policy)
