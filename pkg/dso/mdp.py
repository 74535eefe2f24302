"""
MDP families mapped onto DSO problems, the two equivalence constructions,
an (x, a)-space policy evaluator, and the classical policy-gradient formulas
kept as independent oracles.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, FrozenSet, Optional, Tuple

import numpy as np
import scipy.linalg

from dso.chains import BottleneckChain, TabularChain
from dso.costs import (ActionTable, BottleneckCost, KlEtaCost, MixtureEtaCost, PolicyAveragedCost,
                       PolicyKlCost, TableCost, cost_kl_to_fixed, cost_policy_entropy, cost_sum)
from dso.errors import CapabilityError, InvalidStructureError
from dso.exact import (average_values_from_matrix, occupancy_from_matrix,
                       stationary_from_matrix)
from dso.policies import MixtureTransitions
from dso.problem import Average, DsoProblem, InitialDistribution, Setting, TimeVarying

logger = logging.getLogger(__name__)

ROW_TOL = 1e-12


def _frozen(states) -> FrozenSet[int]:
    return frozenset(int(s) for s in states)


@dataclass
class TabularMdp:
    """Transition tensor p[x, a, x'] and cost table r[x, a]."""

    p: np.ndarray
    r: np.ndarray
    terminal: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.terminal = _frozen(self.terminal)
        n, m, n2 = self.p.shape
        if n != n2:
            raise InvalidStructureError("transition tensor must have shape (n, m, n)")
        if self.r.ndim == 1:
            self.r = np.repeat(self.r[:, None], m, axis=1)
        if self.r.shape != (n, m) or not np.all(np.isfinite(self.r)):
            raise InvalidStructureError("cost table must be finite with shape (n, m)")
        if np.any(self.p < 0) or np.max(np.abs(self.p.sum(axis=2) - 1.0)) > ROW_TOL:
            raise InvalidStructureError("every p[x, a] must be a distribution")
        for s in self.terminal:
            if not np.all(self.p[s, :, s] == 1.0) or np.any(self.r[s] != 0.0):
                raise InvalidStructureError(f"terminal state {s} must be absorbing with zero cost")

    @property
    def n_states(self) -> int:
        return self.p.shape[0]

    @property
    def n_actions(self) -> int:
        return self.p.shape[1]


@dataclass
class LmdpSpec:
    """Baseline chain pbar, state cost r and terminal set of a linearly-solvable problem."""

    baseline: np.ndarray
    cost: np.ndarray
    terminal: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self):
        self.baseline = np.asarray(self.baseline, dtype=float)
        self.cost = np.asarray(self.cost, dtype=float).reshape(-1)
        self.terminal = _frozen(self.terminal)
        n = self.cost.size
        if self.baseline.shape != (n, n):
            raise InvalidStructureError("baseline must be (n, n) with one cost per state")
        if np.any(self.baseline < 0) or np.max(np.abs(self.baseline.sum(axis=1) - 1.0)) > ROW_TOL:
            raise InvalidStructureError("baseline is not row-stochastic")
        if not np.all(np.isfinite(self.cost)):
            raise InvalidStructureError("state costs must be finite")
        for s in self.terminal:
            if self.cost[s] != 0.0 or self.baseline[s, s] != 1.0:
                raise InvalidStructureError(f"terminal state {s} must be absorbing with zero cost")

    @property
    def n_states(self) -> int:
        return self.cost.size


@dataclass
class MdpOrigin:
    """Records how a DsoProblem was mapped, for evaluators and oracles."""

    kind: str
    mdp: Optional[TabularMdp] = None
    policy: Any = None
    action_cost: Any = None
    old_probs: Optional[np.ndarray] = None


@dataclass
class DeterministicMdp:
    """Discrete states, continuous action eta = mu(x, theta)."""

    transitions: Any
    eta_cost: Any
    policy: Any
    terminal: FrozenSet[int] = field(default_factory=frozenset)


class PolicyChain(TabularChain):
    """P(x'|x,theta) = sum_a pi(a|x,theta) p(x'|x,a)."""

    twice_differentiable = True

    def __init__(self, mdp: TabularMdp, policy):
        if policy.n_states != mdp.n_states or policy.n_actions != mdp.n_actions:
            raise InvalidStructureError("policy shape does not match the MDP")
        if policy.terminal != mdp.terminal:
            raise InvalidStructureError("policy and MDP disagree on terminal states")
        super().__init__(mdp.n_states, policy.n_params, mdp.terminal)
        self.mdp = mdp
        self.policy = policy

    def support_mask(self):
        return self.mdp.p.sum(axis=1) > 0

    def _scores(self, theta):
        return np.array([self.policy.scores(x, theta) for x in range(self.n_states)])

    def matrix(self, theta, t=0):
        return np.einsum("xa,xay->xy", self.policy.prob_matrix(theta), self.mdp.p)

    def prob_gradient_tensor(self, theta, t=0):
        pi = self.policy.prob_matrix(theta)
        return np.einsum("xa,xak,xay->xyk", pi, self._scores(theta), self.mdp.p)

    def score_tensor(self, theta, t=0):
        P = self.matrix(theta)
        D = self.prob_gradient_tensor(theta)
        S = np.zeros_like(D)
        pos = P > 0
        S[pos] = D[pos] / P[pos][:, None]
        return S

    def log_hessian_tensor(self, theta, t=0):
        pi = self.policy.prob_matrix(theta)
        Sa = self._scores(theta)
        P = self.matrix(theta)
        S = self.score_tensor(theta)
        n, k = self.n_states, self.n_params
        out = np.zeros((n, n, k, k))
        for x in range(n):
            Hx = self.policy.log_hessian(x, theta)
            second = np.einsum("a,ai,aj->aij", pi[x], Sa[x], Sa[x]) + pi[x][:, None, None] * Hx[None]
            d2P = np.einsum("ay,aij->yij", self.mdp.p[x], second)
            for y in np.flatnonzero(P[x] > 0):
                out[x, y] = d2P[y] / P[x, y] - np.outer(S[x, y], S[x, y])
        return out


def map_gmdp(mdp: TabularMdp, policy, action_cost, setting: Setting,
             p0: InitialDistribution) -> DsoProblem:
    chain = PolicyChain(mdp, policy)
    cost = PolicyAveragedCost(policy, action_cost)
    return DsoProblem(chain, cost, setting, p0, origin=MdpOrigin("g", mdp, policy, action_cost))


def map_smdp(mdp: TabularMdp, policy, setting: Setting, p0: InitialDistribution) -> DsoProblem:
    action_cost = ActionTable(mdp.r, policy.n_params)
    problem = map_gmdp(mdp, policy, action_cost, setting, p0)
    problem.origin.kind = "s"
    return problem


def map_hmdp(mdp: TabularMdp, policy, setting: Setting, p0: InitialDistribution) -> DsoProblem:
    base = map_smdp(mdp, policy, setting, p0)
    cost = cost_sum([base.cost, cost_policy_entropy(policy)], [1.0, 1.0])
    return DsoProblem(base.chain, cost, setting, p0,
                      origin=MdpOrigin("h", mdp, policy, base.origin.action_cost))


def map_rmdp(mdp: TabularMdp, policy, old_probs: np.ndarray, setting: Setting,
             p0: InitialDistribution) -> DsoProblem:
    base = map_smdp(mdp, policy, setting, p0)
    old_probs = np.asarray(old_probs, dtype=float)
    cost = cost_sum([base.cost, PolicyKlCost(policy, old_probs)], [1.0, 1.0])
    return DsoProblem(base.chain, cost, setting, p0,
                      origin=MdpOrigin("r", mdp, policy, base.origin.action_cost, old_probs))


def map_lmdp(spec: LmdpSpec, chain, setting: Setting, p0: InitialDistribution) -> DsoProblem:
    if not chain.tabular or chain.n_states != spec.n_states:
        raise InvalidStructureError("L-MDP chain must be tabular over the spec's states")
    cost = cost_sum([TableCost(spec.cost, chain.n_params), cost_kl_to_fixed(chain, spec.baseline)],
                    [1.0, 1.0])
    return DsoProblem(chain, cost, setting, p0, origin=spec)


def map_dmdp(dmdp: DeterministicMdp, setting: Setting, p0: InitialDistribution) -> DsoProblem:
    chain = BottleneckChain(dmdp.policy, dmdp.transitions, dmdp.terminal)
    cost = BottleneckCost(dmdp.policy, dmdp.eta_cost, dmdp.terminal)
    return DsoProblem(chain, cost, setting, p0, origin=dmdp)


def build_dmdp_from_smdp(mdp: TabularMdp, policy, setting: Setting,
                         p0: InitialDistribution) -> Tuple[DeterministicMdp, DsoProblem]:
    """eta is the full action-probability vector; Ptilde and Ltilde are linear in it."""
    dmdp = DeterministicMdp(MixtureTransitions(mdp.p), MixtureEtaCost(mdp.r), policy, mdp.terminal)
    return dmdp, map_dmdp(dmdp, setting, p0)


def build_dmdp_lmdp_pair(transitions, policy, baseline: np.ndarray, state_cost: np.ndarray,
                         terminal, setting: Setting,
                         p0: InitialDistribution) -> Tuple[DsoProblem, DsoProblem]:
    """D-MDP with cost r_L(x) + KL(p(.|x,eta) || pbar(.|x)) and the matching L-MDP."""
    terminal = _frozen(terminal)
    spec = LmdpSpec(baseline, state_cost, terminal)
    dmdp = DeterministicMdp(transitions, KlEtaCost(transitions, spec.baseline, spec.cost),
                            policy, terminal)
    d_problem = map_dmdp(dmdp, setting, p0)
    l_problem = map_lmdp(spec, BottleneckChain(policy, transitions, terminal), setting, p0)
    return d_problem, l_problem


@dataclass
class MdpEvaluation:
    values: np.ndarray
    q_values: np.ndarray
    average_cost: Optional[float] = None


def evaluate_mdp_policy(p: np.ndarray, ell: np.ndarray, probs: np.ndarray, setting: Setting,
                        terminal=()) -> MdpEvaluation:
    """Policy evaluation on the (x, a) pair chain, without any DSO machinery."""
    if isinstance(setting, TimeVarying):
        raise InvalidStructureError("pair-chain evaluation covers stationary settings only")
    n, m, _ = p.shape
    M = np.einsum("xay,yb->xayb", p, probs).reshape(n * m, n * m)
    cost = np.asarray(ell, dtype=float).reshape(n * m).copy()
    if isinstance(setting, Average):
        q = stationary_from_matrix(M)
        J = float(q @ cost)
        A = np.eye(n * m) - M + np.outer(np.ones(n * m), q)
        Q = scipy.linalg.solve(A, cost - J).reshape(n, m)
        return MdpEvaluation(np.sum(probs * Q, axis=1), Q, J)
    stop = np.zeros((n, m), dtype=bool)
    stop[list(_frozen(terminal))] = True
    stop = stop.reshape(-1)
    M[stop] = 0.0
    cost[stop] = 0.0
    Q = scipy.linalg.solve(np.eye(n * m) - setting.gamma * M, cost).reshape(n, m)
    return MdpEvaluation(np.sum(probs * Q, axis=1), Q)


def _entropy_rows(probs: np.ndarray) -> np.ndarray:
    logp = np.zeros_like(probs)
    logp[probs > 0] = np.log(probs[probs > 0])
    return -np.sum(probs * logp, axis=1)


def mdp_view(problem: DsoProblem, theta) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(p, ell, pi) of the MDP a mapped problem came from, evaluated at theta."""
    origin = problem.origin
    n = problem.chain.n_states
    if isinstance(origin, MdpOrigin):
        probs = origin.policy.prob_matrix(theta)
        ell = np.array([origin.action_cost.values(x, theta) for x in range(n)])
        nonterminal = np.array([x not in origin.mdp.terminal for x in range(n)])
        if origin.kind == "h":
            ell = ell + (_entropy_rows(probs) * nonterminal)[:, None]
        elif origin.kind == "r":
            old = origin.old_probs
            kl = np.sum(np.where(old > 0, old * np.log(np.where(old > 0, old, 1.0) / probs), 0.0), axis=1)
            ell = ell + (kl * nonterminal)[:, None]
        return origin.mdp.p, ell, probs
    if isinstance(origin, LmdpSpec):
        P = problem.chain.matrix(theta)
        pos = P > 0
        log_ratio = np.zeros_like(P)
        log_ratio[pos] = np.log(P[pos] / origin.baseline[pos])
        ell = origin.cost + np.sum(P * log_ratio, axis=1)
        p = np.repeat(np.eye(n)[None], n, axis=0)
        return p, np.repeat(ell[:, None], n, axis=1), P
    if isinstance(origin, DeterministicMdp):
        p = np.zeros((n, 1, n))
        ell = np.zeros((n, 1))
        for x in range(n):
            if x in origin.terminal:
                p[x, 0, x] = 1.0
                continue
            eta = origin.policy.mu(x, theta)
            p[x, 0] = origin.transitions.row(x, eta)
            ell[x, 0] = origin.eta_cost.value(x, eta)
        return p, ell, np.ones((n, 1))
    raise CapabilityError("problem was not built by an MDP mapping")


def _density(P: np.ndarray, setting: Setting, p0: np.ndarray, terminal) -> np.ndarray:
    if isinstance(setting, Average):
        return stationary_from_matrix(P)
    P_prop = P.copy()
    P_prop[list(_frozen(terminal))] = 0.0
    return occupancy_from_matrix(P_prop, p0, setting.gamma)


def smdp_policy_gradient_oracle(mdp: TabularMdp, policy, theta, setting: Setting,
                                p0: InitialDistribution) -> np.ndarray:
    """sum_x w(x) sum_a grad pi(a|x) Q(x,a)."""
    theta = np.asarray(theta, dtype=float)
    probs = policy.prob_matrix(theta)
    evaluation = evaluate_mdp_policy(mdp.p, mdp.r, probs, setting, mdp.terminal)
    P = np.einsum("xa,xay->xy", probs, mdp.p)
    w = _density(P, setting, p0.weights, mdp.terminal)
    grad = np.zeros(policy.n_params)
    for x in range(mdp.n_states):
        grad += w[x] * (evaluation.q_values[x] @ policy.jacobian(x, theta))
    return grad


def dpg_gradient_oracle(problem: DsoProblem, theta) -> np.ndarray:
    """sum_x w(x) grad mu(x)^T grad_eta Q(x, eta) at eta = mu(x, theta)."""
    dmdp = problem.origin
    if not isinstance(dmdp, DeterministicMdp):
        raise CapabilityError("problem has no bottleneck construction attached")
    theta = np.asarray(theta, dtype=float)
    p, ell, probs = mdp_view(problem, theta)
    V = evaluate_mdp_policy(p, ell, probs, problem.setting, dmdp.terminal).values
    w = _density(p[:, 0, :], problem.setting, problem.p0.weights, dmdp.terminal)
    grad = np.zeros(problem.n_params)
    gamma = problem.setting.gamma
    for x in range(problem.chain.n_states):
        if x in dmdp.terminal:
            continue
        eta = dmdp.policy.mu(x, theta)
        dq = dmdp.eta_cost.grad(x, eta) + gamma * dmdp.transitions.row_grad(x, eta) @ V
        grad += w[x] * (dmdp.policy.jacobian(x, theta).T @ dq)
    return grad


def lmdp_policy_gradient_oracle(problem: DsoProblem, theta) -> np.ndarray:
    """Average setting: sum_x d(x) sum_x' grad P (ln(P / pbar) + v(x'))."""
    spec = problem.origin
    if not isinstance(spec, LmdpSpec) or not isinstance(problem.setting, Average):
        raise CapabilityError("needs an average-setting problem built by map_lmdp")
    theta = np.asarray(theta, dtype=float)
    P = problem.chain.matrix(theta)
    D = problem.chain.prob_gradient_tensor(theta)
    pos = P > 0
    log_ratio = np.zeros_like(P)
    log_ratio[pos] = np.log(P[pos] / spec.baseline[pos])
    cost = spec.cost + np.sum(P * log_ratio, axis=1)
    d = stationary_from_matrix(P)
    _, v = average_values_from_matrix(P, cost, d)
    return np.einsum("x,xyk,xy->k", d, D, log_ratio + v[None, :])
