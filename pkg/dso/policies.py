"""
Policies and bottleneck building blocks.

A bottleneck map supplies eta = mu(x, theta) and its Jacobian with shape
(n_eta, n_params). A transition family supplies rows Ptilde(.|x, eta) and
their eta-gradients with shape (n_eta, n_states).
"""

from typing import Iterable, Optional

import numpy as np
from scipy.special import softmax

from dso.errors import InvalidStructureError


class SoftmaxPolicy:
    """pi(a|x,theta) = softmax of theta[index(x)] over actions.

    Terminal states carry no logits; their policy is uniform and constant.
    The action-probability vector doubles as a bottleneck map, eta = pi(.|x).
    """

    def __init__(self, n_states: int, n_actions: int, terminal: Iterable[int] = (),
                 offset: int = 0, n_params: Optional[int] = None):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        self.terminal = frozenset(int(s) for s in terminal)
        self._index = {}
        cursor = int(offset)
        for x in range(self.n_states):
            if x in self.terminal:
                continue
            self._index[x] = np.arange(cursor, cursor + self.n_actions)
            cursor += self.n_actions
        self.n_params = cursor if n_params is None else int(n_params)
        if self.n_params < cursor:
            raise InvalidStructureError(f"policy needs at least {cursor} parameters")
        self.n_eta = self.n_actions

    def param_index(self, x: int) -> np.ndarray:
        return self._index[x].copy()

    def probs(self, x: int, theta: np.ndarray) -> np.ndarray:
        if x in self.terminal:
            return np.full(self.n_actions, 1.0 / self.n_actions)
        return softmax(theta[self._index[x]])

    def prob_matrix(self, theta: np.ndarray) -> np.ndarray:
        return np.array([self.probs(x, theta) for x in range(self.n_states)])

    def scores(self, x: int, theta: np.ndarray) -> np.ndarray:
        """(n_actions, n_params) rows grad ln pi(a|x)."""
        S = np.zeros((self.n_actions, self.n_params))
        if x not in self.terminal:
            S[:, self._index[x]] = np.eye(self.n_actions) - self.probs(x, theta)[None, :]
        return S

    def log_hessian(self, x: int, theta: np.ndarray) -> np.ndarray:
        """Hessian of ln pi(a|x); the same matrix for every action."""
        H = np.zeros((self.n_params, self.n_params))
        if x not in self.terminal:
            p = self.probs(x, theta)
            idx = self._index[x]
            H[idx[:, None], idx[None, :]] = -(np.diag(p) - np.outer(p, p))
        return H

    def mu(self, x: int, theta: np.ndarray) -> np.ndarray:
        return self.probs(x, theta)

    def jacobian(self, x: int, theta: np.ndarray) -> np.ndarray:
        return self.probs(x, theta)[:, None] * self.scores(x, theta)


class LinearPolicy:
    """mu(x,theta) = W[x] theta + bias[x]."""

    def __init__(self, weights: np.ndarray, bias: Optional[np.ndarray] = None):
        W = np.asarray(weights, dtype=float)
        if W.ndim != 3:
            raise InvalidStructureError("weights must have shape (n_states, n_eta, n_params)")
        self.W = W
        self.n_states, self.n_eta, self.n_params = W.shape
        self.bias = np.zeros((self.n_states, self.n_eta)) if bias is None else np.asarray(bias, dtype=float)

    @classmethod
    def identity(cls, n_states: int, n_params: int) -> "LinearPolicy":
        return cls(np.repeat(np.eye(n_params)[None], n_states, axis=0))

    def mu(self, x, theta):
        return self.W[x] @ theta + self.bias[x]

    def jacobian(self, x, theta):
        return self.W[x].copy()


class MixtureTransitions:
    """Ptilde(x'|x,eta) = sum_a eta_a p(x'|x,a); linear in eta."""

    def __init__(self, p: np.ndarray):
        self.p = np.asarray(p, dtype=float)
        self.n_states, self.n_eta, _ = self.p.shape

    def support_mask(self):
        return self.p.sum(axis=1) > 0

    def row(self, x, eta):
        return eta @ self.p[x]

    def row_grad(self, x, eta):
        return self.p[x].copy()


class LogitTransitions:
    """Ptilde(x'|x,eta) = softmax over the support of base[x] + eta . C[x]."""

    def __init__(self, base_logits: np.ndarray, weights: np.ndarray):
        self.base = np.asarray(base_logits, dtype=float)
        self.C = np.asarray(weights, dtype=float)
        self.n_states = self.base.shape[0]
        self.n_eta = self.C.shape[1]
        if self.C.shape != (self.n_states, self.n_eta, self.n_states):
            raise InvalidStructureError("weights must have shape (n_states, n_eta, n_states)")
        self._mask = np.isfinite(self.base)
        if not np.all(self._mask.any(axis=1)):
            raise InvalidStructureError("every row needs a finite logit")

    def support_mask(self):
        return self._mask.copy()

    def row(self, x, eta):
        mask = self._mask[x]
        out = np.zeros(self.n_states)
        out[mask] = softmax(self.base[x, mask] + eta @ self.C[x][:, mask])
        return out

    def row_grad(self, x, eta):
        p = self.row(x, eta)
        C = self.C[x] * self._mask[x][None, :]
        centered = C - (C @ p)[:, None]
        return centered * p[None, :]
