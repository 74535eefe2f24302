"""
Rollout generation.

Each rollout draws from its own RNG stream derived from (seed, index), so a
batch is identical whatever the worker count. Tabular quantities are frozen
once per batch in a `FrozenModel` and shared read-only across workers.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from dso.errors import CapabilityError, InvalidStructureError
from dso.problem import DsoProblem, TimeVarying
from utils.file_utils import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

TERMINAL_MODE = "terminal"
HORIZON_MODE = "horizon"
GEOMETRIC_MODE = "geometric"
MODES = (TERMINAL_MODE, HORIZON_MODE, GEOMETRIC_MODE)

END_TERMINAL = "terminal"
END_HORIZON_CAP = "horizon-cap"
END_GEOMETRIC = "geometric-stop"

DEFAULT_HORIZON_CAP = 10_000
DIVERGED_FRACTION_LIMIT = 0.01


def rollout_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


class FrozenModel:
    """Chain and cost evaluated at a fixed theta, with per-time tables for tabular chains."""

    def __init__(self, problem: DsoProblem, theta: np.ndarray):
        self.problem = problem
        self.theta = theta
        self.tabular = problem.is_tabular
        self.time_varying = isinstance(problem.setting, TimeVarying)
        self._tables: Dict[Any, np.ndarray] = {}

    def time_index(self, t: int) -> int:
        return t if self.time_varying else 0

    def _table(self, kind: str, t: int) -> np.ndarray:
        key = (kind, self.time_index(t))
        table = self._tables.get(key)
        if table is None:
            chain, cost, th, tt = self.problem.chain, self.problem.cost, self.theta, key[1]
            n = chain.n_states
            if kind == "P":
                table = chain.matrix(th, tt)
            elif kind == "cdf":
                table = np.cumsum(self._table("P", t), axis=1)
            elif kind == "S":
                table = chain.score_tensor(th, tt)
            elif kind == "H":
                table = chain.log_hessian_tensor(th, tt)
            elif kind == "L":
                table = cost.value_table(th, n, tt)
            elif kind == "dL":
                table = cost.grad_table(th, n, tt)
            elif kind == "d2L":
                table = cost.hess_table(th, n, tt)
            else:
                raise KeyError(kind)
            self._tables[key] = table
        return table

    def warm(self, horizon: int) -> None:
        """Populate the sampling tables before worker threads start."""
        if not self.tabular:
            return
        last = horizon if self.time_varying else 0
        for t in range(last + 1):
            self._table("L", t)
            if not self.time_varying or t < last:
                self._table("cdf", t)
                self._table("S", t)

    def matrix(self, t: int) -> np.ndarray:
        return self._table("P", t)

    def cost(self, x, t: int) -> float:
        if self.tabular:
            return float(self._table("L", t)[x])
        return self.problem.cost.value(x, self.theta, self.time_index(t))

    def cost_grad(self, x, t: int) -> np.ndarray:
        if self.tabular:
            return self._table("dL", t)[x]
        return self.problem.cost.grad(x, self.theta, self.time_index(t))

    def cost_hess(self, x, t: int) -> np.ndarray:
        if self.tabular:
            return self._table("d2L", t)[x]
        return self.problem.cost.hess(x, self.theta, self.time_index(t))

    def score(self, x, x_next, t: int) -> np.ndarray:
        if self.tabular:
            return self._table("S", t)[x, x_next]
        return self.problem.chain.score(x, x_next, self.theta, self.time_index(t))

    def log_prob(self, x, x_next, t: int) -> float:
        if self.tabular:
            p = self._table("P", t)[x, x_next]
            return float(np.log(p)) if p > 0 else -np.inf
        return self.problem.chain.log_prob(x, x_next, self.theta, self.time_index(t))

    def log_hessian(self, x, x_next, t: int) -> np.ndarray:
        if self.tabular:
            return self._table("H", t)[x, x_next]
        return self.problem.chain.log_hessian(x, x_next, self.theta, self.time_index(t))

    def sample(self, x, rng: np.random.Generator, t: int):
        if self.tabular:
            cdf = self._table("cdf", t)[x]
            return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), cdf.size - 1)
        return self.problem.chain.sample(x, self.theta, rng, self.time_index(t))


@dataclass
class Rollout:
    index: int
    states: List[Any]
    costs: np.ndarray
    scores: np.ndarray
    end_reason: str
    returns: Optional[np.ndarray] = None
    diverged: bool = False

    @property
    def length(self) -> int:
        return len(self.states)

    @property
    def n_transitions(self) -> int:
        return len(self.states) - 1


def fill_returns(rollout: Rollout, discount: float) -> None:
    """R_T = L(x_T); R_t = discount * R_{t+1} + L(x_t)."""
    R = np.zeros(rollout.costs.size)
    acc = 0.0
    for t in range(rollout.costs.size - 1, -1, -1):
        acc = discount * acc + rollout.costs[t]
        R[t] = acc
    rollout.returns = R


def check_returns(rollout: Rollout, discount: float) -> None:
    R, L = rollout.returns, rollout.costs
    if R is None or R.size != L.size:
        raise InvalidStructureError(f"rollout {rollout.index} has no returns")
    if R[-1] != L[-1] or np.any(R[:-1] != discount * R[1:] + L[:-1]):
        raise InvalidStructureError(f"return recursion violated in rollout {rollout.index}")


@dataclass
class RolloutBatch:
    rollouts: List[Rollout]
    theta: np.ndarray
    seed: int
    setting: str
    mode: str
    discount: float
    n_requested: int
    n_diverged: int = 0
    n_capped: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return self.n_diverged <= DIVERGED_FRACTION_LIMIT * self.n_requested

    @property
    def size(self) -> int:
        return len(self.rollouts)

    def to_records(self) -> List[Dict[str, Any]]:
        """One record per rollout: seed, index, states, costs, end reason."""
        records = []
        for r in self.rollouts:
            states = [s.tolist() if isinstance(s, np.ndarray) else int(s) for s in r.states]
            records.append({
                "seed": self.seed,
                "index": r.index,
                "states": states,
                "costs": [float(c) for c in r.costs],
                "end_reason": r.end_reason,
            })
        return records

    def write_jsonl(self, path) -> None:
        write_jsonl(path, self.to_records())

    @staticmethod
    def read_jsonl(path) -> List[Dict[str, Any]]:
        return read_jsonl(path)


def _simulate(model: FrozenModel, index: int, seed: int, mode: str, horizon: int,
              gamma: float, terminal) -> Rollout:
    rng = rollout_rng(seed, index)
    x = model.problem.p0.sample(rng)
    states = [x]
    costs = [model.cost(x, 0)]
    scores = []
    t = 0
    reason = END_HORIZON_CAP
    diverged = False
    while True:
        if model.tabular and x in terminal:
            reason = END_TERMINAL
            break
        if t >= horizon:
            reason = END_HORIZON_CAP
            break
        if mode == GEOMETRIC_MODE and rng.random() >= gamma:
            reason = END_GEOMETRIC
            break
        x_next = model.sample(x, rng, t)
        if not np.all(np.isfinite(x_next)):
            diverged = True
            break
        scores.append(model.score(x, x_next, t))
        costs.append(model.cost(x_next, t + 1))
        states.append(x_next)
        x = x_next
        t += 1
    n_params = model.problem.n_params
    return Rollout(index, states, np.array(costs, dtype=float),
                   np.array(scores, dtype=float).reshape(len(scores), n_params), reason,
                   diverged=diverged or not np.all(np.isfinite(costs)))


def generate_rollouts(problem: DsoProblem, theta, n_rollouts: int,
                      horizon_cap: int = DEFAULT_HORIZON_CAP, mode: str = TERMINAL_MODE,
                      seed: int = 0, threads: int = 1) -> RolloutBatch:
    """Sample `n_rollouts` trajectories under theta.

    Time-varying problems always run to their horizon. In geometric mode each
    step continues with probability gamma and returns are undiscounted.
    """
    if n_rollouts < 1:
        raise InvalidStructureError("need at least one rollout")
    if mode not in MODES:
        raise InvalidStructureError(f"unknown termination mode {mode!r}")
    if not problem.chain.samplable:
        raise CapabilityError("chain cannot be sampled")
    theta = problem.check_theta(theta)
    if isinstance(problem.setting, TimeVarying):
        mode, horizon = HORIZON_MODE, problem.setting.horizon
    else:
        horizon = int(horizon_cap)
    gamma = problem.gamma
    discount = 1.0 if mode == GEOMETRIC_MODE else gamma

    model = FrozenModel(problem, theta)
    model.warm(horizon)
    terminal = problem.terminal
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        results = list(pool.map(
            lambda i: _simulate(model, i, seed, mode, horizon, gamma, terminal), range(n_rollouts)))

    kept, n_diverged, n_capped = [], 0, 0
    for r in results:
        if r.diverged:
            n_diverged += 1
            continue
        if r.end_reason == END_HORIZON_CAP and mode != HORIZON_MODE:
            n_capped += 1
        fill_returns(r, discount)
        kept.append(r)
    batch = RolloutBatch(kept, theta.copy(), int(seed), problem.setting.tag, mode, discount,
                         n_rollouts, n_diverged, n_capped)
    if n_diverged:
        logger.warning("%d of %d rollouts diverged and were dropped", n_diverged, n_rollouts)
    if not batch.valid:
        logger.warning("batch flagged invalid: diverged fraction above %.0f%%",
                       100 * DIVERGED_FRACTION_LIMIT)
    if n_capped:
        logger.warning("%d rollouts hit the horizon cap of %d steps", n_capped, horizon)
    logger.debug("generated %d rollouts, mean length %.3f", len(kept),
                 np.mean([r.length for r in kept]) if kept else 0.0)
    return batch
