"""
Exact linear-algebraic evaluation of tabular DSO problems: values,
occupancy and stationary densities, objectives and gradients.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from dso.errors import (CapabilityError, ErgodicityError, InvalidStructureError,
                        ReachabilityError, SpectralError)
from dso.problem import Average, DsoProblem, FirstExit, TimeVarying

logger = logging.getLogger(__name__)

DIRECT_SOLVE_LIMIT = 200
ITERATION_TOL = 1e-12
MAX_ITERATIONS = 100000


@dataclass
class ValueTable:
    values: np.ndarray  # (n,) or (T+1, n) for time-varying problems
    setting: str
    residual: float = 0.0


@dataclass
class DensityTable:
    weights: np.ndarray
    kind: str  # "occupancy" | "stationary" | "forward"
    residual: float = 0.0


@dataclass
class AverageCostPair:
    J: float
    V: ValueTable
    density: DensityTable


def _require_tabular(problem: DsoProblem) -> None:
    if not problem.is_tabular:
        raise CapabilityError("exact evaluation needs a tabular chain")


def transition_matrix(problem: DsoProblem, theta, t: int = 0) -> np.ndarray:
    _require_tabular(problem)
    return problem.chain.matrix(theta, t)


def terminal_mask(problem: DsoProblem) -> np.ndarray:
    mask = np.zeros(problem.chain.n_states, dtype=bool)
    mask[list(problem.terminal)] = True
    return mask


def propagation_matrix(problem: DsoProblem, theta, t: int = 0) -> np.ndarray:
    """Transition matrix with terminal rows zeroed: episodes stop there."""
    P = transition_matrix(problem, theta, t)
    P[terminal_mask(problem)] = 0.0
    return P


def cost_vector(problem: DsoProblem, theta, t: int = 0) -> np.ndarray:
    return problem.cost.value_table(theta, problem.chain.n_states, t)


def cost_gradients(problem: DsoProblem, theta, t: int = 0) -> np.ndarray:
    return problem.cost.grad_table(theta, problem.chain.n_states, t)


def check_reachability(P: np.ndarray, terminal: np.ndarray) -> None:
    """Raise unless every state has a positive-probability path into `terminal`."""
    reach = terminal.copy()
    while True:
        grown = reach | (P[:, reach] > 0).any(axis=1)
        if np.array_equal(grown, reach):
            break
        reach = grown
    if not reach.all():
        stuck = np.flatnonzero(~reach).tolist()
        raise ReachabilityError(f"states {stuck} never reach the terminal set")


def fixed_point(update: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                tol: float = ITERATION_TOL, max_iter: int = MAX_ITERATIONS) -> np.ndarray:
    x = x0
    for it in range(max_iter):
        nxt = update(x)
        if np.max(np.abs(nxt - x)) < tol:
            logger.debug("fixed point reached after %d sweeps", it + 1)
            return nxt
        x = nxt
    raise SpectralError(f"fixed-point iteration did not converge in {max_iter} sweeps")


def occupancy_from_matrix(P_prop: np.ndarray, p0: np.ndarray, gamma: float) -> np.ndarray:
    n = P_prop.shape[0]
    if n <= DIRECT_SOLVE_LIMIT:
        return scipy.linalg.solve(np.eye(n) - gamma * P_prop.T, p0)
    return fixed_point(lambda r: p0 + gamma * P_prop.T @ r, p0.copy())


def stationary_from_matrix(P: np.ndarray) -> np.ndarray:
    """Unique stationary distribution, or ErgodicityError.

    Repeated squaring runs the power iteration from every initial state at
    once; all rows must converge to the same distribution.
    """
    n = P.shape[0]
    M = P.copy()
    for _ in range(64):
        M2 = M @ M
        if np.max(np.abs(M2 - M)) < ITERATION_TOL:
            M = M2
            break
        M = M2
    else:
        raise ErgodicityError("power iteration did not converge; chain may be periodic")
    if np.max(np.abs(M - M[0][None, :])) > 1e-10:
        raise ErgodicityError("stationary distribution is not unique; chain is reducible")
    if n <= DIRECT_SOLVE_LIMIT:
        basis = scipy.linalg.null_space(P.T - np.eye(n))
        if basis.shape[1] != 1:
            raise ErgodicityError(f"invariant subspace has dimension {basis.shape[1]}")
        d = basis[:, 0]
        d = np.abs(d) / np.abs(d).sum()
    else:
        d = M[0] / M[0].sum()
    return d


def average_values_from_matrix(P: np.ndarray, L: np.ndarray, d: np.ndarray):
    """(J, V) with J + V = L + P V and d . V = 0."""
    n = P.shape[0]
    J = float(d @ L)
    A = np.eye(n) - P + np.outer(np.ones(n), d)
    V = scipy.linalg.solve(A, L - J)
    return J, V


def _check_terminal_costs(problem: DsoProblem, L: np.ndarray) -> None:
    term = terminal_mask(problem)
    if np.any(np.abs(L[term]) > 1e-12):
        states = [int(s) for s in np.flatnonzero(term & (np.abs(L) > 1e-12))]
        raise InvalidStructureError(f"terminal states {states} must have zero cost; chains built without an "
                                    "explicit terminal set treat absorbing states as terminal")


def solve_value_episodic(problem: DsoProblem, theta) -> ValueTable:
    if not problem.setting.is_episodic:
        raise InvalidStructureError(f"episodic solve on a {problem.setting.tag} problem")
    P_prop = propagation_matrix(problem, theta)
    L = cost_vector(problem, theta)
    _check_terminal_costs(problem, L)
    gamma = problem.gamma
    if isinstance(problem.setting, FirstExit):
        check_reachability(transition_matrix(problem, theta), terminal_mask(problem))
    n = L.size
    if n <= DIRECT_SOLVE_LIMIT:
        V = scipy.linalg.solve(np.eye(n) - gamma * P_prop, L)
    else:
        V = fixed_point(lambda v: L + gamma * P_prop @ v, L.copy())
    residual = float(np.max(np.abs(V - L - gamma * P_prop @ V)))
    logger.debug("episodic value residual %.3g", residual)
    return ValueTable(V, problem.setting.tag, residual)


def stationary_density(problem: DsoProblem, theta) -> DensityTable:
    P = transition_matrix(problem, theta)
    d = stationary_from_matrix(P)
    return DensityTable(d, "stationary", float(np.max(np.abs(P.T @ d - d))))


def solve_value_average(problem: DsoProblem, theta) -> AverageCostPair:
    if not isinstance(problem.setting, Average):
        raise InvalidStructureError(f"average solve on a {problem.setting.tag} problem")
    P = transition_matrix(problem, theta)
    density = stationary_density(problem, theta)
    if density.weights.min() <= 0.0:
        raise ErgodicityError("stationary distribution lacks full support")
    L = cost_vector(problem, theta)
    J, V = average_values_from_matrix(P, L, density.weights)
    residual = float(np.max(np.abs(J + V - L - P @ V)))
    return AverageCostPair(J, ValueTable(V, "average", residual), density)


def solve_value_timevarying(problem: DsoProblem, theta) -> ValueTable:
    if not isinstance(problem.setting, TimeVarying):
        raise InvalidStructureError(f"time-varying solve on a {problem.setting.tag} problem")
    _require_tabular(problem)
    T = problem.setting.horizon
    n = problem.chain.n_states
    V = np.zeros((T + 1, n))
    V[T] = cost_vector(problem, theta, T)
    for t in range(T - 1, -1, -1):
        V[t] = cost_vector(problem, theta, t) + problem.chain.matrix(theta, t) @ V[t + 1]
    return ValueTable(V, "time-varying")


def forward_densities(problem: DsoProblem, theta) -> np.ndarray:
    """State marginals mu_t for t = 0..T of a time-varying problem."""
    T = problem.setting.horizon
    mu = np.zeros((T + 1, problem.chain.n_states))
    mu[0] = problem.p0.weights
    for t in range(T):
        mu[t + 1] = problem.chain.matrix(theta, t).T @ mu[t]
    return mu


def discounted_occupancy(problem: DsoProblem, theta) -> DensityTable:
    """rho(x) = sum_{t>=0} gamma^t Pr(x_t = x); terminals receive mass but do not pass it on."""
    if not problem.setting.is_episodic:
        raise InvalidStructureError(f"occupancy needs an episodic problem, got {problem.setting.tag}")
    P_prop = propagation_matrix(problem, theta)
    if isinstance(problem.setting, FirstExit):
        check_reachability(transition_matrix(problem, theta), terminal_mask(problem))
    p0 = problem.p0.weights
    rho = occupancy_from_matrix(P_prop, p0, problem.gamma)
    residual = float(np.max(np.abs(rho - p0 - problem.gamma * P_prop.T @ rho)))
    return DensityTable(rho, "occupancy", residual)


def objective(problem: DsoProblem, theta) -> float:
    theta = problem.check_theta(theta)
    if isinstance(problem.setting, Average):
        return solve_value_average(problem, theta).J
    if isinstance(problem.setting, TimeVarying):
        return float(problem.p0.weights @ solve_value_timevarying(problem, theta).values[0])
    return float(problem.p0.weights @ solve_value_episodic(problem, theta).values)


def weighting(problem: DsoProblem, theta):
    """(density, values, gamma) used by stationary-setting gradients and surrogates."""
    if isinstance(problem.setting, Average):
        pair = solve_value_average(problem, theta)
        return pair.density.weights, pair.V.values, 1.0
    if isinstance(problem.setting, TimeVarying):
        raise InvalidStructureError("time-varying problems have no single weighting density")
    return (discounted_occupancy(problem, theta).weights,
            solve_value_episodic(problem, theta).values, problem.gamma)


def assemble_gradient(weights: np.ndarray, cost_grads: np.ndarray, prob_grads: np.ndarray,
                      values: np.ndarray, gamma: float,
                      baseline: Optional[np.ndarray] = None) -> np.ndarray:
    """sum_x w(x) [grad L(x) + gamma sum_x' grad P(x'|x) (V(x') - b(x))]."""
    centered = values[None, :] - (0.0 if baseline is None else baseline[:, None])
    return weights @ cost_grads + gamma * np.einsum("x,xyk,xy->k", weights, prob_grads, centered)


def masked_prob_gradients(problem: DsoProblem, theta, t: int, form: str) -> np.ndarray:
    chain = problem.chain
    if form == "direct":
        D = chain.prob_gradient_tensor(theta, t)
    elif form == "expectation":
        D = chain.matrix(theta, t)[:, :, None] * chain.score_tensor(theta, t)
    else:
        raise ValueError(f"unknown gradient form {form!r}")
    D = D.copy()
    D[terminal_mask(problem)] = 0.0
    return D


def exact_gradient(problem: DsoProblem, theta, form: str = "direct") -> np.ndarray:
    """Exact objective gradient.

    `form="direct"` contracts grad P against the values; `form="expectation"`
    uses P * grad ln P instead. Both agree to rounding.
    """
    _require_tabular(problem)
    theta = problem.check_theta(theta)
    if isinstance(problem.setting, TimeVarying):
        return _exact_gradient_timevarying(problem, theta, form)
    w, V, gamma = weighting(problem, theta)
    D = masked_prob_gradients(problem, theta, 0, form)
    return assemble_gradient(w, cost_gradients(problem, theta), D, V, gamma)


def _exact_gradient_timevarying(problem: DsoProblem, theta, form: str) -> np.ndarray:
    T = problem.setting.horizon
    V = solve_value_timevarying(problem, theta).values
    mu = forward_densities(problem, theta)
    grad = mu[T] @ cost_gradients(problem, theta, T)
    for t in range(T):
        D = masked_prob_gradients(problem, theta, t, form)
        grad = grad + assemble_gradient(mu[t], cost_gradients(problem, theta, t), D, V[t + 1], 1.0)
    return grad


def exact_gradient_bottleneck(problem: DsoProblem, theta) -> np.ndarray:
    """Gradient through eta = mu(x,theta): sum_x w J_mu^T (grad_eta L + gamma sum grad_eta P V)."""
    chain_b = getattr(problem.chain, "bottleneck", None)
    cost_b = getattr(problem.cost, "bottleneck", None)
    if chain_b is None or cost_b is None:
        raise CapabilityError("problem does not expose bottleneck structure")
    if chain_b.policy is not cost_b.policy:
        raise CapabilityError("chain and cost act through different bottleneck maps")
    _require_tabular(problem)
    theta = problem.check_theta(theta)
    w, V, gamma = weighting(problem, theta)
    policy = chain_b.policy
    grad = np.zeros(problem.n_params)
    for x in range(problem.chain.n_states):
        if x in problem.terminal:
            continue
        eta = policy.mu(x, theta)
        inner = cost_b.eta_cost.grad(x, eta) + gamma * chain_b.transitions.row_grad(x, eta) @ V
        grad += w[x] * (policy.jacobian(x, theta).T @ inner)
    return grad
