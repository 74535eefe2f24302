"""
Problem library for the experiment runner.

Seeds are split with numpy's SeedSequence so that every consumer draws from
its own stream:

    SeedSequence(seed).spawn(2)[0]   problem structure (MDP tensors, obstacles, costs)
    SeedSequence(seed).spawn(2)[1]   initial parameters of random variants
    SeedSequence([seed, 2, i])       rollouts of outer iteration i
    SeedSequence([seed, 3])          Z-learning sampling stream
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from dso.chains import LinearGaussianPolicy, TimeVaryingChain, make_gaussian_chain, make_softmax_chain
from dso.costs import (ActionTable, LinearQuadraticCost, PolicyAveragedCost, QuadraticCost, TableCost,
                       TimeVaryingCost, cost_sum)
from dso.errors import ConfigError, InvalidStructureError
from dso.mdp import LmdpSpec, PolicyChain, TabularMdp, map_lmdp, map_smdp
from dso.policies import LinearPolicy, LogitTransitions, SoftmaxPolicy
from dso.problem import (Average, DsoProblem, EpisodicDiscounted, FirstExit, InitialDistribution,
                         TimeVarying)
from dso.zlearn import make_z_chain, one_hot_features

logger = logging.getLogger(__name__)

ROLLOUT_STREAM = 2
ZLEARN_STREAM = 3


@dataclass
class BuiltProblem:
    problem: DsoProblem
    theta0: np.ndarray
    lmdp: Optional[LmdpSpec] = None
    info: Dict[str, Any] = field(default_factory=dict)


def split_seed(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """(structure rng, initial-theta rng) for a config seed."""
    structure, theta = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(structure), np.random.default_rng(theta)


def rollout_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([int(seed), ROLLOUT_STREAM, int(iteration)]).generate_state(1)[0])


def zlearn_seed(seed: int) -> int:
    return int(np.random.SeedSequence([int(seed), ZLEARN_STREAM]).generate_state(1)[0])


def _uniform_over(n_states: int, excluded) -> InitialDistribution:
    w = np.ones(n_states)
    w[list(excluded)] = 0.0
    return InitialDistribution.tabular(w / w.sum())


def _setting(spec, terminal) -> Any:
    if spec.setting == "first-exit":
        return FirstExit(frozenset(terminal))
    if spec.setting == "episodic":
        return EpisodicDiscounted(spec.gamma)
    if spec.setting == "average":
        return Average()
    return TimeVarying(spec.horizon)


def canonical_exit_problem(setting=None) -> DsoProblem:
    """Two states; state 0 costs 1 per step and exits to the absorbing state 1.

    J = 1 / P(1|0); at theta = 0 that is 2 with gradient (+1, -1).
    """
    chain = make_softmax_chain(2, {0: [0, 1]}, terminal={1})
    cost = TableCost([1.0, 0.0], chain.n_params)
    return DsoProblem(chain, cost, setting or FirstExit({1}), InitialDistribution.delta(2, 0))


def _random_support(rng, n: int, x: int, ring: bool) -> list:
    succ = {x, (x + 1) % n if ring else min(x + 1, n - 1)}
    extra = rng.choice(n, size=min(n, 2), replace=False)
    return sorted(succ | {int(y) for y in extra})


def random_softmax_problem(spec, rng) -> DsoProblem:
    n = spec.n_states
    terminal = {n - 1} if spec.setting == "first-exit" else set()
    ring = spec.setting == "average"
    support = {x: _random_support(rng, n, x, ring) for x in range(n) if x not in terminal}
    chain = make_softmax_chain(n, support, terminal)
    k = chain.n_params
    r = rng.uniform(0.0, 1.0, n)
    scale = 0.05 * rng.uniform(0.0, 1.0, n)
    for s in terminal:
        r[s] = scale[s] = 0.0
    cost = cost_sum([TableCost(r, k), QuadraticCost(np.zeros(n), scale, rng.normal(0.0, 1.0, k))],
                    [1.0, 1.0])
    p0 = _uniform_over(n, terminal)
    return DsoProblem(chain, cost, _setting(spec, terminal), p0)


def random_tabular_mdp(rng, n_states: int, n_actions: int, terminal=()) -> TabularMdp:
    """Dirichlet transition rows and uniform costs; terminal states absorb at zero cost."""
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0.0, 1.0, (n_states, n_actions))
    for s in terminal:
        p[s] = 0.0
        p[s, :, s] = 1.0
        r[s] = 0.0
    return TabularMdp(p, r, frozenset(terminal))


def random_smdp_problem(spec, rng) -> Tuple[DsoProblem, TabularMdp, SoftmaxPolicy]:
    terminal = {spec.n_states - 1} if spec.setting == "first-exit" else set()
    mdp = random_tabular_mdp(rng, spec.n_states, spec.n_actions, terminal)
    policy = SoftmaxPolicy(spec.n_states, spec.n_actions, terminal)
    problem = map_smdp(mdp, policy, _setting(spec, terminal), _uniform_over(spec.n_states, terminal))
    return problem, mdp, policy


def random_timevarying_problem(spec, rng) -> DsoProblem:
    """Per-step random MDPs under one shared softmax policy; final cost is state-only."""
    if spec.horizon < 1:
        raise ConfigError("time-varying problems need a horizon of at least 1", "problem.horizon")
    n, m = (2, 2) if spec.variant == "canonical" else (spec.n_states, spec.n_actions)
    policy = SoftmaxPolicy(n, m)
    mdps = [random_tabular_mdp(rng, n, m) for _ in range(spec.horizon)]
    chain = TimeVaryingChain([PolicyChain(mdp, policy) for mdp in mdps])
    costs = [PolicyAveragedCost(policy, ActionTable(mdp.r, policy.n_params)) for mdp in mdps]
    costs.append(TableCost(rng.uniform(0.0, 1.0, n), policy.n_params))
    return DsoProblem(chain, TimeVaryingCost(costs), TimeVarying(spec.horizon),
                      InitialDistribution.uniform(n))


def gaussian_linear_problem(spec, rng) -> DsoProblem:
    """x' ~ Normal(A x + B (K x + k), S) with quadratic state and control costs."""
    d = spec.state_dim
    if spec.variant == "canonical":
        A = 0.9 * np.eye(d)
    else:
        A = rng.normal(0.0, 1.0, (d, d))
        A *= 0.8 / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
    policy = LinearGaussianPolicy(d, d)
    chain = make_gaussian_chain(A, np.eye(d), 0.1 * np.eye(d), policy)
    cost = LinearQuadraticCost(np.eye(d), 0.1 * np.eye(d), policy)
    p0 = InitialDistribution.gaussian(np.ones(d), 0.01 * np.eye(d))
    return DsoProblem(chain, cost, EpisodicDiscounted(spec.gamma), p0)


def _grid_neighbors(size: int, cell: int):
    r, c = divmod(cell, size)
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < size and 0 <= cc < size:
            yield rr * size + cc


def gridworld_lmdp(size: int, step_cost: float = 0.003, goal: Optional[int] = None,
                   obstacle_fraction: float = 0.0, seed=0) -> LmdpSpec:
    """Grid with a passive random walk: uniform over staying and each free neighbour.

    Obstacles are drawn from `seed`; cells cut off from the goal are dropped, so
    states are the free cells connected to the goal, in row-major order. The
    goal is absorbing with zero cost; every other state costs `step_cost`. The
    small default keeps the goal-side Z entries away from zero, which holds the
    relative error of tabular Z-learning on a 5x5 grid under 5% at 1e5 steps.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_cells = size * size
    goal = n_cells - 1 if goal is None else int(goal)
    if not 0 <= goal < n_cells:
        raise InvalidStructureError(f"goal cell {goal} is outside a {size}x{size} grid")
    blocked = np.zeros(n_cells, dtype=bool)
    candidates = np.array([c for c in range(n_cells) if c != goal])
    n_blocked = int(round(obstacle_fraction * candidates.size))
    if n_blocked:
        blocked[rng.choice(candidates, size=n_blocked, replace=False)] = True
    connected = {goal}
    queue = deque([goal])
    while queue:
        cell = queue.popleft()
        for nb in _grid_neighbors(size, cell):
            if not blocked[nb] and nb not in connected:
                connected.add(nb)
                queue.append(nb)
    cells = sorted(connected)
    index = {cell: i for i, cell in enumerate(cells)}
    n = len(cells)
    baseline = np.zeros((n, n))
    cost = np.full(n, float(step_cost))
    for cell in cells:
        i = index[cell]
        if cell == goal:
            baseline[i, i] = 1.0
            cost[i] = 0.0
            continue
        targets = [i] + [index[nb] for nb in _grid_neighbors(size, cell) if nb in index]
        baseline[i, targets] = 1.0 / len(targets)
    if n < n_cells:
        logger.info("gridworld keeps %d of %d cells after obstacles", n, n_cells)
    return LmdpSpec(baseline, cost, frozenset({index[goal]}))


def gridworld_problem(spec, rng) -> Tuple[DsoProblem, LmdpSpec]:
    lmdp = gridworld_lmdp(spec.size, spec.step_cost, None, spec.obstacle_fraction, rng)
    gamma = 1.0 if spec.setting == "first-exit" else spec.gamma
    chain = make_z_chain(lmdp, one_hot_features(lmdp), gamma)
    problem = map_lmdp(lmdp, chain, _setting(spec, lmdp.terminal),
                       _uniform_over(lmdp.n_states, lmdp.terminal))
    return problem, lmdp


def build_problem(spec) -> BuiltProblem:
    """Instantiate the problem a ProblemSpec describes."""
    structure_rng, theta_rng = split_seed(spec.seed)
    lmdp = None
    info: Dict[str, Any] = {"kind": spec.kind, "variant": spec.variant, "setting": spec.setting}
    if spec.kind == "softmax-tabular":
        if spec.variant == "canonical":
            if spec.setting == "average":
                raise ConfigError("the canonical exit problem has no average-cost form", "problem.setting")
            setting = FirstExit({1}) if spec.setting == "first-exit" else EpisodicDiscounted(spec.gamma)
            problem = canonical_exit_problem(setting)
        else:
            problem = random_softmax_problem(spec, structure_rng)
    elif spec.kind == "smdp-random":
        problem, _, _ = random_smdp_problem(spec, structure_rng)
    elif spec.kind == "timevarying-tabular":
        problem = random_timevarying_problem(spec, structure_rng)
    elif spec.kind == "gaussian-linear":
        problem = gaussian_linear_problem(spec, structure_rng)
    elif spec.kind == "gridworld-lmdp":
        problem, lmdp = gridworld_problem(spec, structure_rng)
    else:
        raise ConfigError(f"unknown problem kind {spec.kind!r}", "problem.kind")

    if spec.theta0 is not None:
        if len(spec.theta0) != problem.n_params:
            raise ConfigError(f"expected {problem.n_params} initial parameters, got {len(spec.theta0)}",
                              "problem.theta0")
        theta0 = np.array(spec.theta0, dtype=float)
    elif spec.variant == "random" and spec.kind in ("softmax-tabular", "smdp-random"):
        theta0 = theta_rng.normal(0.0, 0.5, problem.n_params)
    else:
        theta0 = np.zeros(problem.n_params)
    info["n_params"] = problem.n_params
    if problem.is_tabular:
        info["n_states"] = problem.chain.n_states
    logger.info("built %s problem (%s, %s) with %d parameters", spec.kind, spec.variant,
                spec.setting, problem.n_params)
    return BuiltProblem(problem, theta0, lmdp, info)


def random_lmdp_dmdp_instance(rng, n_states: int = 6, n_eta: int = 2, n_params: int = 3):
    """Pieces for build_dmdp_lmdp_pair: logit transitions, linear bottleneck, baseline, costs.

    The last state is terminal and every state can step to its successor, so
    the exit is reachable.
    """
    n = n_states
    terminal = {n - 1}
    mask = rng.random((n, n)) < 0.5
    for x in range(n - 1):
        mask[x, x] = mask[x, x + 1] = True
    mask[n - 1] = False
    mask[n - 1, n - 1] = True
    base = np.where(mask, rng.normal(0.0, 1.0, (n, n)), -np.inf)
    transitions = LogitTransitions(base, rng.normal(0.0, 1.0, (n, n_eta, n)))
    policy = LinearPolicy(rng.normal(0.0, 1.0, (n, n_eta, n_params)),
                          rng.normal(0.0, 0.5, (n, n_eta)))
    baseline = np.where(mask, rng.uniform(0.1, 1.0, (n, n)), 0.0)
    baseline /= baseline.sum(axis=1, keepdims=True)
    state_cost = rng.uniform(0.0, 1.0, n)
    state_cost[n - 1] = 0.0
    return transitions, policy, baseline, state_cost, terminal
