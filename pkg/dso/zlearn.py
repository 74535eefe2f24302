"""
Linearly-solvable problems in Z = exp(-V) form.

For an L-MDP (state cost r plus KL to a baseline chain pbar) the optimal
chain is P*(x'|x) = pbar(x'|x) Z(x')^g / G[Z^g](x) with G[f] = pbar f. This
module solves for Z exactly (a linear system for first-exit problems, a
fixed point for discounted ones, a principal eigenvector for average cost),
builds the parametric chain induced by a linear energy E(x) = theta . phi(x),
and learns Z from sampled transitions.
"""

import logging
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional

import numpy as np
import scipy.linalg
from scipy.special import logsumexp, softmax

from dso.chains import TabularChain
from dso.errors import InvalidStructureError, ReachabilityError, SpectralError
from dso.exact import (average_values_from_matrix, check_reachability, exact_gradient,
                       stationary_from_matrix)
from dso.mdp import LmdpSpec, map_lmdp
from dso.natural import damped_solve, fisher_matrix
from dso.problem import Average, InitialDistribution

logger = logging.getLogger(__name__)

Z_FLOOR = 1e-12
POWER_TOL = 1e-13
POWER_MAX_ITERATIONS = 100_000
DISCOUNTED_TOL = 1e-13


def apply_G(baseline: np.ndarray, f) -> np.ndarray:
    """G[f](x) = sum_y pbar(y|x) f(y)."""
    return np.asarray(baseline, dtype=float) @ np.asarray(f, dtype=float)


@dataclass
class ZFunction:
    """Tabular desirability Z = exp(-E)."""

    energies: np.ndarray
    gamma: float = 1.0
    terminal: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.energies)):
            raise InvalidStructureError("Z must be strictly positive and finite")

    @classmethod
    def from_values(cls, Z, gamma: float = 1.0, terminal=()) -> "ZFunction":
        Z = np.asarray(Z, dtype=float)
        if np.any(Z <= 0):
            raise InvalidStructureError("Z must be strictly positive")
        return cls(-np.log(Z), gamma, frozenset(terminal))

    @property
    def values(self) -> np.ndarray:
        return np.exp(-self.energies)

    @property
    def n_states(self) -> int:
        return self.energies.size


def _interior(spec: LmdpSpec) -> np.ndarray:
    mask = np.ones(spec.n_states, dtype=bool)
    mask[list(spec.terminal)] = False
    return mask


def bellman_residual(spec: LmdpSpec, Z: np.ndarray, gamma: float = 1.0, scale: float = 1.0) -> float:
    """max |scale * Z - exp(-r) G[Z^g]| / Z over nonterminal states."""
    Z = np.asarray(Z, dtype=float)
    target = np.exp(-spec.cost) * apply_G(spec.baseline, Z ** gamma)
    inner = _interior(spec)
    if not inner.any():
        return 0.0
    return float(np.max(np.abs(scale * Z[inner] - target[inner]) / Z[inner]))


def solve_z_firstexit(spec: LmdpSpec) -> ZFunction:
    """Solve (I - diag(e^-r) Pbar_II) Z_I = diag(e^-r) Pbar_IT Z_T."""
    if not spec.terminal:
        raise InvalidStructureError("first-exit solve needs terminal states")
    term = ~_interior(spec)
    check_reachability(spec.baseline, term)
    inner = ~term
    q = np.exp(-spec.cost)
    Z = np.ones(spec.n_states)
    Z[term] = q[term]
    A = np.eye(inner.sum()) - q[inner, None] * spec.baseline[np.ix_(inner, inner)]
    b = q[inner] * (spec.baseline[np.ix_(inner, term)] @ Z[term])
    try:
        Z[inner] = scipy.linalg.solve(A, b)
    except np.linalg.LinAlgError as e:
        raise ReachabilityError(f"first-exit Z system is singular: {e}") from e
    if np.any(Z <= 0):
        raise ReachabilityError("first-exit Z has nonpositive entries")
    logger.debug("first-exit Z residual %.3g", bellman_residual(spec, Z))
    return ZFunction(-np.log(Z), 1.0, spec.terminal)


def solve_z_discounted(spec: LmdpSpec, gamma: float) -> ZFunction:
    """Fixed point V = r - ln G[exp(-g V)], a g-contraction in the sup norm."""
    if not 0.0 <= gamma < 1.0:
        raise InvalidStructureError(f"discounted solve needs gamma in [0, 1), got {gamma}")
    inner = _interior(spec)
    support = spec.baseline > 0
    log_pbar = np.where(support, np.log(np.where(support, spec.baseline, 1.0)), -np.inf)
    V = spec.cost.copy()
    for it in range(POWER_MAX_ITERATIONS):
        nxt = spec.cost - logsumexp(log_pbar - gamma * V[None, :], axis=1)
        nxt[~inner] = spec.cost[~inner]
        if np.max(np.abs(nxt - V)) < DISCOUNTED_TOL:
            logger.debug("discounted Z fixed point after %d sweeps", it + 1)
            return ZFunction(nxt, gamma, spec.terminal)
        V = nxt
    raise SpectralError("discounted Z iteration did not converge")


def solve_z_average(spec: LmdpSpec):
    """Principal eigenpair of f -> exp(-r) G[f]; returns (ZFunction, J) with J = -ln(eigenvalue)."""
    if spec.terminal:
        raise InvalidStructureError("average-cost Z needs a problem without terminal states")
    q = np.exp(-spec.cost)
    f = np.ones(spec.n_states)
    lam = 1.0
    for it in range(POWER_MAX_ITERATIONS):
        g = q * apply_G(spec.baseline, f)
        lam = float(np.max(np.abs(g)))
        if lam <= 0:
            raise SpectralError("operator annihilated the iterate")
        g = g / lam
        if np.max(np.abs(g - f)) < POWER_TOL:
            f = g
            break
        f = g
    else:
        raise SpectralError(f"power iteration did not converge in {POWER_MAX_ITERATIONS} iterations")
    residual = bellman_residual(spec, f, 1.0, scale=lam)
    logger.debug("average Z: eigenvalue %.12g after %d iterations, residual %.3g", lam, it + 1, residual)
    return ZFunction(-np.log(f), 1.0, frozenset()), -np.log(lam)


def _induced_matrix(baseline: np.ndarray, energies: np.ndarray, gamma: float, terminal) -> np.ndarray:
    support = baseline > 0
    logits = np.full(baseline.shape, -np.inf)
    rows, cols = np.nonzero(support)
    logits[rows, cols] = np.log(baseline[rows, cols]) - gamma * energies[cols]
    P = softmax(logits, axis=1)
    for s in terminal:
        P[s] = 0.0
        P[s, s] = 1.0
    return P


@dataclass
class ZChain:
    """The chain pbar Z^g / G[Z^g] induced by a Z function."""

    baseline: np.ndarray
    z: ZFunction

    @property
    def matrix(self) -> np.ndarray:
        return _induced_matrix(self.baseline, self.z.energies, self.z.gamma, self.z.terminal)


def optimal_chain(spec: LmdpSpec, z: ZFunction) -> ZChain:
    if z.n_states != spec.n_states:
        raise InvalidStructureError("Z and spec disagree on the number of states")
    return ZChain(spec.baseline, z)


def lmdp_cost_identity(spec: LmdpSpec, z: ZFunction) -> np.ndarray:
    """r - ln G[Z^g] + g E_{P*}[ln Z]: the L-MDP step cost evaluated at P*."""
    P = optimal_chain(spec, z).matrix
    lnZ = -z.energies
    out = spec.cost - np.log(apply_G(spec.baseline, np.exp(z.gamma * lnZ))) + z.gamma * (P @ lnZ)
    out[list(spec.terminal)] = spec.cost[list(spec.terminal)]
    return out


class LinearZChain(TabularChain):
    """P(x'|x,theta) proportional to pbar(x'|x) exp(-g E(x')) with E = theta . phi(x) off the terminal set."""

    twice_differentiable = True

    def __init__(self, spec: LmdpSpec, features: np.ndarray, gamma: float = 1.0):
        features = np.asarray(features, dtype=float)
        if features.ndim != 2 or features.shape[0] != spec.n_states:
            raise InvalidStructureError("features must have one row per state")
        super().__init__(spec.n_states, features.shape[1], spec.terminal)
        self.spec = spec
        self.gamma = float(gamma)
        self.features = features.copy()
        self.features[list(spec.terminal)] = 0.0
        self._terminal_energy = np.zeros(spec.n_states)
        self._terminal_energy[list(spec.terminal)] = spec.cost[list(spec.terminal)]
        self._mask = spec.baseline > 0

    def energies(self, theta) -> np.ndarray:
        return self.features @ np.asarray(theta, dtype=float) + self._terminal_energy

    def z_function(self, theta) -> ZFunction:
        return ZFunction(self.energies(theta), self.gamma, self.terminal)

    def support_mask(self):
        return self._mask.copy()

    def matrix(self, theta, t=0):
        return _induced_matrix(self.spec.baseline, self.energies(theta), self.gamma, self.terminal)

    def _centered(self, theta):
        P = self.matrix(theta)
        mean_phi = P @ self.features
        return P, self.features[None, :, :] - mean_phi[:, None, :]

    def score_tensor(self, theta, t=0):
        P, centered = self._centered(theta)
        S = -self.gamma * centered
        S[~self._mask] = 0.0
        S[list(self.terminal)] = 0.0
        return S

    def log_hessian_tensor(self, theta, t=0):
        P, centered = self._centered(theta)
        cov = np.einsum("xy,xyi,xyj->xij", P, centered, centered)
        shape = (self.n_states, self.n_states) + cov.shape[1:]
        H = np.broadcast_to(-(self.gamma ** 2) * cov[:, None], shape).copy()
        H[~self._mask] = 0.0
        H[list(self.terminal)] = 0.0
        return H


def make_z_chain(spec: LmdpSpec, features: np.ndarray, gamma: float = 1.0) -> LinearZChain:
    return LinearZChain(spec, features, gamma)


def one_hot_features(spec: LmdpSpec) -> np.ndarray:
    """One column per nonterminal state."""
    inner = np.flatnonzero(_interior(spec))
    phi = np.zeros((spec.n_states, inner.size))
    phi[inner, np.arange(inner.size)] = 1.0
    return phi


@dataclass
class ZLearnSchedule:
    """beta = c / (c + prior visits to the updated state)."""

    c: float = 100.0

    def beta(self, visits: int) -> float:
        return self.c / (self.c + visits)


@dataclass
class ZLearnResult:
    z: ZFunction
    theta: Optional[np.ndarray]
    visits: np.ndarray
    curve: List[dict] = field(default_factory=list)
    n_floored: int = 0


class _TabularZ:
    def __init__(self, values: np.ndarray):
        self.Z = values.copy()

    def value(self, x):
        return self.Z[x]

    def table(self):
        return self.Z

    def update(self, x, target, beta):
        self.Z[x] += beta * (target - self.Z[x])
        if self.Z[x] <= 0:
            self.Z[x] = Z_FLOOR
            return True
        return False


class _LinearZ:
    def __init__(self, chain: LinearZChain, theta: np.ndarray):
        self.chain = chain
        self.theta = np.asarray(theta, dtype=float).copy()

    def table(self):
        return np.exp(-self.chain.energies(self.theta))

    def value(self, x):
        return float(np.exp(-self.chain.energies(self.theta)[x]))

    def update(self, x, target, beta):
        # gradient step on 0.5 (Z - target)^2 with dZ/dtheta = -Z phi
        z = self.value(x)
        self.theta += beta * (z - target) * z * self.chain.features[x]
        return False


def _train(spec: LmdpSpec, z0, schedule: ZLearnSchedule, seed: int, steps: int, gamma: float,
           greedy: bool, mode: str, features: Optional[np.ndarray], theta0,
           exact: Optional[np.ndarray], record_every: int) -> ZLearnResult:
    if not spec.terminal:
        raise InvalidStructureError("Z-learning runs on first-exit or discounted problems with terminals")
    if greedy and mode not in ("exact-G", "double-sample"):
        raise ValueError(f"unknown integral mode {mode!r}")
    rng = np.random.default_rng(seed)
    inner = np.flatnonzero(_interior(spec))
    term = spec.terminal
    q = np.exp(-spec.cost)
    cdf = np.cumsum(spec.baseline, axis=1)
    if features is not None:
        chain = LinearZChain(spec, features, gamma)
        model = _LinearZ(chain, np.zeros(chain.n_params) if theta0 is None else theta0)
    else:
        values = np.ones(spec.n_states) if z0 is None else np.asarray(z0.values, dtype=float)
        values = values.copy()
        values[list(term)] = q[list(term)]
        model = _TabularZ(values)
    visits = np.zeros(spec.n_states, dtype=int)
    curve = []
    floored = 0

    def draw(row_cdf):
        return min(int(np.searchsorted(row_cdf, rng.random() * row_cdf[-1], side="right")),
                   spec.n_states - 1)

    def record(step):
        Z = model.table()
        row = {"step": step, "residual": bellman_residual(spec, Z, gamma)}
        if exact is not None:
            row["rel_error"] = float(np.max(np.abs(Z[inner] - exact[inner]) / exact[inner]))
        curve.append(row)

    x = int(rng.choice(inner))
    record(0)
    for step in range(1, steps + 1):
        if greedy:
            Zg = model.table() ** gamma
            row = spec.baseline[x] * Zg
            y = draw(np.cumsum(row))
            if mode == "exact-G":
                target = q[x] * float(spec.baseline[x] @ Zg)
            else:
                target = q[x] * model.value(draw(cdf[x])) ** gamma
        else:
            y = draw(cdf[x])
            target = q[x] * model.value(y) ** gamma
        if model.update(x, target, schedule.beta(visits[x])):
            floored += 1
            logger.warning("Z at state %d projected to the floor %.0e", x, Z_FLOOR)
        visits[x] += 1
        x = int(rng.choice(inner)) if y in term else y
        if record_every and step % record_every == 0:
            record(step)
    if not record_every or steps % record_every:
        record(steps)
    Z = model.table()
    theta = model.theta.copy() if isinstance(model, _LinearZ) else None
    logger.info("Z-learning finished: %d steps, final residual %.4g", steps, curve[-1]["residual"])
    return ZLearnResult(ZFunction(-np.log(Z), gamma, term), theta, visits, curve, floored)


def zlearn_baseline(spec: LmdpSpec, z0: Optional[ZFunction] = None,
                    schedule: Optional[ZLearnSchedule] = None, seed: int = 0, steps: int = 100_000,
                    gamma: float = 1.0, features: Optional[np.ndarray] = None, theta0=None,
                    exact: Optional[np.ndarray] = None, record_every: int = 0) -> ZLearnResult:
    """Sample x' ~ pbar and move Z(x) toward exp(-r(x)) Z(x')^g."""
    return _train(spec, z0, schedule or ZLearnSchedule(), seed, steps, gamma, False, "exact-G",
                  features, theta0, exact, record_every)


def zlearn_greedy(spec: LmdpSpec, z0: Optional[ZFunction] = None,
                  schedule: Optional[ZLearnSchedule] = None, seed: int = 0, steps: int = 100_000,
                  mode: str = "exact-G", gamma: float = 1.0, features: Optional[np.ndarray] = None,
                  theta0=None, exact: Optional[np.ndarray] = None,
                  record_every: int = 0) -> ZLearnResult:
    """Visit states under the chain induced by the current Z.

    `mode="exact-G"` uses the target exp(-r) G[Z^g](x); `mode="double-sample"`
    draws a second, independent successor from pbar for the target.
    """
    return _train(spec, z0, schedule or ZLearnSchedule(), seed, steps, gamma, True, mode,
                  features, theta0, exact, record_every)


@dataclass
class CompatibleCheckReport:
    natural: np.ndarray
    compatible: np.ndarray
    max_abs_diff: float
    fisher_rank: int
    gradient: np.ndarray
    omega: np.ndarray


def fit_compatible_value(problem, theta) -> np.ndarray:
    """omega minimizing E_{d,P}[(v(x') - omega . (phi(x') - E_P[phi | x]))^2], minimum norm."""
    chain = problem.chain
    P = chain.matrix(theta)
    cost = problem.cost.value_table(theta, chain.n_states)
    d = stationary_from_matrix(P)
    _, v = average_values_from_matrix(P, cost, d)
    centered = chain.features[None, :, :] - (P @ chain.features)[:, None, :]
    w = d[:, None] * P
    A = np.einsum("xy,xyi,xyj->ij", w, centered, centered)
    b = np.einsum("xy,xyi,y->i", w, centered, v)
    return scipy.linalg.pinvh(A) @ b


def compatible_natural_gradient_check(spec: LmdpSpec, features: np.ndarray, theta,
                                      damping: float = 0.0) -> CompatibleCheckReport:
    """Compare F^-1 grad J with theta - omega on the range of F."""
    chain = make_z_chain(spec, features, 1.0)
    problem = map_lmdp(spec, chain, Average(), InitialDistribution.uniform(spec.n_states))
    theta = problem.check_theta(theta)
    grad = exact_gradient(problem, theta)
    F = fisher_matrix(problem, theta).matrix
    omega = fit_compatible_value(problem, theta)
    F_pinv = scipy.linalg.pinvh(F)
    projector = F_pinv @ F
    rank = int(np.linalg.matrix_rank(F))
    if damping > 0:
        natural, _ = damped_solve(F, grad, damping)
        natural = projector @ natural
    else:
        natural = F_pinv @ grad
    if rank < F.shape[0]:
        logger.info("Fisher matrix has rank %d of %d; comparing on its range", rank, F.shape[0])
    compatible = projector @ (theta - omega)
    return CompatibleCheckReport(natural, compatible, float(np.max(np.abs(natural - compatible))),
                                 rank, grad, omega)
