"""
Fisher information of the chain and natural-gradient solves.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from dso.errors import (CapabilityError, InvalidStructureError, RegularizationRequiredError,
                        StalenessError)
from dso.exact import discounted_occupancy, forward_densities, stationary_density, terminal_mask
from dso.problem import Average, DsoProblem, TimeVarying
from dso.rollouts import RolloutBatch

logger = logging.getLogger(__name__)

MAX_ESCALATIONS = 3
INITIAL_DAMPING = 1e-10


@dataclass
class FisherMatrix:
    matrix: np.ndarray
    source: str  # "exact" | "sampled"
    n: int = 0
    damping: float = 0.0
    stderr: Optional[np.ndarray] = None

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())


def damped_solve(M: np.ndarray, rhs: np.ndarray, damping: float = 0.0,
                 escalations: int = MAX_ESCALATIONS) -> Tuple[np.ndarray, float]:
    """Cholesky solve of (M + damping I) x = rhs, raising damping x10 on failure."""
    n = M.shape[0]
    lam = float(damping)
    for attempt in range(escalations + 1):
        try:
            factor = scipy.linalg.cho_factor(M + lam * np.eye(n))
            return scipy.linalg.cho_solve(factor, rhs), lam
        except np.linalg.LinAlgError:
            if attempt == escalations:
                break
            lam = INITIAL_DAMPING if lam == 0.0 else 10.0 * lam
            logger.warning("matrix not positive definite; raising damping to %.1e", lam)
    raise RegularizationRequiredError(f"solve failed with damping up to {lam:.1e}")


def _exact_fisher(problem: DsoProblem, theta) -> np.ndarray:
    chain = problem.chain
    if isinstance(problem.setting, TimeVarying):
        T = problem.setting.horizon
        if T == 0:
            return np.zeros((problem.n_params, problem.n_params))
        mu = forward_densities(problem, theta)
        blocks = [(mu[t] / T, t) for t in range(T)]
    else:
        if isinstance(problem.setting, Average):
            w = stationary_density(problem, theta).weights
        else:
            w = discounted_occupancy(problem, theta).weights.copy()
            w[terminal_mask(problem)] = 0.0
            total = w.sum()
            w = w / total if total > 0 else w
        blocks = [(w, 0)]
    F = np.zeros((problem.n_params, problem.n_params))
    mask = terminal_mask(problem) if not isinstance(problem.setting, TimeVarying) else None
    for w, t in blocks:
        P = chain.matrix(theta, t)
        if mask is not None:
            P[mask] = 0.0
        S = chain.score_tensor(theta, t)
        F += np.einsum("x,xy,xyi,xyj->ij", w, P, S, S)
    return F


def _sampled_fisher(problem: DsoProblem, theta, batch: RolloutBatch) -> FisherMatrix:
    if batch.theta.shape != theta.shape or not np.array_equal(batch.theta, theta):
        raise StalenessError("batch was generated under different parameters")
    k = problem.n_params
    num = np.zeros((batch.size, k, k))
    den = np.zeros(batch.size)
    for i, r in enumerate(batch.rollouts):
        if r.n_transitions == 0:
            continue
        w = batch.discount ** np.arange(r.n_transitions)
        num[i] = np.einsum("t,ti,tj->ij", w, r.scores, r.scores)
        den[i] = w.sum()
    if den.sum() <= 0:
        raise InvalidStructureError("batch contains no transitions")
    F = num.sum(axis=0) / den.sum()
    n = batch.size
    stderr = None
    if n > 1:
        resid = num - F[None] * den[:, None, None]
        stderr = np.sqrt((resid ** 2).sum(axis=0) / (n * (n - 1))) / den.mean()
    return FisherMatrix(0.5 * (F + F.T), "sampled", n, stderr=stderr)


def fisher_matrix(problem: DsoProblem, theta, source: str = "exact",
                  batch: Optional[RolloutBatch] = None) -> FisherMatrix:
    """E[score score^T] under the normalized state weighting and the chain."""
    if not problem.chain.differentiable:
        raise CapabilityError("chain has no score")
    theta = problem.check_theta(theta)
    if source == "exact":
        if not problem.is_tabular:
            raise CapabilityError("exact Fisher needs a tabular chain")
        F = _exact_fisher(problem, theta)
        return FisherMatrix(0.5 * (F + F.T), "exact")
    if source in ("batch", "sampled"):
        if batch is None:
            raise InvalidStructureError("sampled Fisher needs a rollout batch")
        return _sampled_fisher(problem, theta, batch)
    raise ValueError(f"unknown Fisher source {source!r}")


def natural_gradient(problem: DsoProblem, theta, grad, fisher=None, damping: float = 0.0) -> np.ndarray:
    """Solve (F + damping I) g = grad."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != (problem.n_params,):
        raise InvalidStructureError(
            f"gradient has shape {grad.shape}, expected ({problem.n_params},)")
    if fisher is None:
        fisher = fisher_matrix(problem, theta)
    F = fisher.matrix if isinstance(fisher, FisherMatrix) else np.asarray(fisher, dtype=float)
    if not np.allclose(F, F.T, atol=1e-12):
        raise InvalidStructureError("Fisher matrix is not symmetric")
    g, used = damped_solve(F, grad, damping)
    if isinstance(fisher, FisherMatrix):
        fisher.damping = used
    return g


def gaussian_state_moments(batch: RolloutBatch) -> Tuple[float, np.ndarray, np.ndarray]:
    """Discount-weighted (mass, mean, second moment) of states that emit a transition."""
    mass, first, second = 0.0, None, None
    for r in batch.rollouts:
        for t in range(r.n_transitions):
            x = np.asarray(r.states[t], dtype=float)
            w = batch.discount ** t
            if first is None:
                first = np.zeros(x.size)
                second = np.zeros((x.size, x.size))
            mass += w
            first += w * x
            second += w * np.outer(x, x)
    if first is None:
        raise InvalidStructureError("batch contains no transitions")
    return mass, first / mass, second / mass


def gaussian_fisher_closed_form(chain, theta, mean, second_moment) -> np.ndarray:
    """E[G(x) S^-1 G(x)^T] for a mean Jacobian G affine in x, from state moments."""
    mean = np.asarray(mean, dtype=float)
    n = mean.size
    G0 = chain.mean_jacobian(np.zeros(n), theta)
    Gs = [G0] + [chain.mean_jacobian(e, theta) - G0 for e in np.eye(n)]
    M = np.zeros((n + 1, n + 1))
    M[0, 0] = 1.0
    M[0, 1:] = M[1:, 0] = mean
    M[1:, 1:] = np.asarray(second_moment, dtype=float)
    S_inv = scipy.linalg.inv(chain.S)
    F = np.zeros((G0.shape[0], G0.shape[0]))
    for a in range(n + 1):
        for b in range(n + 1):
            if M[a, b] != 0.0:
                F += M[a, b] * Gs[a] @ S_inv @ Gs[b].T
    return 0.5 * (F + F.T)
