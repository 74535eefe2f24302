"""
Problem abstraction: parameter vectors, settings, initial distributions and
the DsoProblem bundle that every solver and estimator consumes.
"""

from dataclasses import dataclass, field
from typing import Any, FrozenSet, Iterable, Optional

import numpy as np

from dso.errors import InvalidStructureError

PROB_TOL = 1e-12


def param_vector(values: Iterable[float], n_params: Optional[int] = None) -> np.ndarray:
    """Return a float copy of `values`, checking length and finiteness."""
    theta = np.array(values, dtype=float).reshape(-1)
    if n_params is not None and theta.shape[0] != n_params:
        raise InvalidStructureError(
            f"parameter vector has length {theta.shape[0]}, expected {n_params}"
        )
    if not np.all(np.isfinite(theta)):
        raise InvalidStructureError("parameter vector has non-finite entries")
    return theta


@dataclass(frozen=True)
class Setting:
    """Common base of the four problem settings."""

    @property
    def gamma(self) -> float:
        return 1.0

    @property
    def terminal(self) -> FrozenSet[int]:
        return frozenset()

    @property
    def tag(self) -> str:
        raise NotImplementedError

    @property
    def is_episodic(self) -> bool:
        return False


@dataclass(frozen=True)
class EpisodicDiscounted(Setting):
    # discount 0 is the myopic case J = E_p0[L]
    discount: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.discount < 1.0:
            raise InvalidStructureError(f"discount must lie in [0, 1), got {self.discount}")

    @property
    def gamma(self) -> float:
        return self.discount

    @property
    def tag(self) -> str:
        return "episodic"

    @property
    def is_episodic(self) -> bool:
        return True


@dataclass(frozen=True)
class FirstExit(Setting):
    terminal_states: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "terminal_states", frozenset(int(s) for s in self.terminal_states))
        if not self.terminal_states:
            raise InvalidStructureError("first-exit setting needs a nonempty terminal set")

    @property
    def terminal(self) -> FrozenSet[int]:
        return self.terminal_states

    @property
    def tag(self) -> str:
        return "first-exit"

    @property
    def is_episodic(self) -> bool:
        return True


@dataclass(frozen=True)
class Average(Setting):
    @property
    def tag(self) -> str:
        return "average"


@dataclass(frozen=True)
class TimeVarying(Setting):
    # horizon 0 is accepted as the degenerate single-cost case
    horizon: int = 1

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 0:
            raise InvalidStructureError(f"horizon must be a nonnegative integer, got {self.horizon}")

    @property
    def tag(self) -> str:
        return "time-varying"


class InitialDistribution:
    """Tabular weight vector or Gaussian (mean, covariance) over initial states."""

    def __init__(self, weights: Optional[np.ndarray] = None,
                 mean: Optional[np.ndarray] = None, cov: Optional[np.ndarray] = None):
        if (weights is None) == (mean is None):
            raise InvalidStructureError("give either tabular weights or a Gaussian mean")
        self.weights = None
        self.mean = None
        self.cov = None
        if weights is not None:
            w = np.asarray(weights, dtype=float).reshape(-1)
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise InvalidStructureError("initial weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > PROB_TOL:
                raise InvalidStructureError(f"initial weights sum to {w.sum():.15g}, not 1")
            self.weights = w
            self._cdf = np.cumsum(w)
        else:
            m = np.atleast_1d(np.asarray(mean, dtype=float))
            c = np.zeros((m.size, m.size)) if cov is None else np.atleast_2d(np.asarray(cov, dtype=float))
            if c.shape != (m.size, m.size) or not np.allclose(c, c.T, atol=1e-12):
                raise InvalidStructureError("initial covariance must be a symmetric square matrix")
            if np.linalg.eigvalsh(c).min() < -1e-12:
                raise InvalidStructureError("initial covariance is not positive semidefinite")
            self.mean = m
            self.cov = c

    @classmethod
    def tabular(cls, weights) -> "InitialDistribution":
        return cls(weights=weights)

    @classmethod
    def delta(cls, n_states: int, state: int) -> "InitialDistribution":
        w = np.zeros(n_states)
        w[state] = 1.0
        return cls(weights=w)

    @classmethod
    def uniform(cls, n_states: int) -> "InitialDistribution":
        return cls(weights=np.full(n_states, 1.0 / n_states))

    @classmethod
    def gaussian(cls, mean, cov=None) -> "InitialDistribution":
        return cls(mean=mean, cov=cov)

    @property
    def is_tabular(self) -> bool:
        return self.weights is not None

    def sample(self, rng: np.random.Generator):
        if self.is_tabular:
            idx = int(np.searchsorted(self._cdf, rng.random() * self._cdf[-1], side="right"))
            return min(idx, self.weights.size - 1)
        if not np.any(self.cov):
            return self.mean.copy()
        return rng.multivariate_normal(self.mean, self.cov)


@dataclass
class DsoProblem:
    """A chain and a cost sharing one parameter vector, plus setting and p0."""

    chain: Any
    cost: Any
    setting: Setting
    p0: InitialDistribution
    # the construction this problem was mapped from, when an oracle needs it
    origin: Any = None

    def __post_init__(self):
        if self.chain.n_params != self.cost.n_params:
            raise InvalidStructureError(
                f"chain has {self.chain.n_params} parameters but cost has {self.cost.n_params}"
            )
        if self.chain.tabular:
            if not self.p0.is_tabular or self.p0.weights.size != self.chain.n_states:
                raise InvalidStructureError("tabular chain needs a tabular p0 over its states")
            missing = set(self.setting.terminal) - set(self.chain.terminal)
            if missing:
                raise InvalidStructureError(
                    f"terminal states {sorted(missing)} are not absorbing in the chain"
                )
        if isinstance(self.setting, FirstExit) and not self.chain.tabular:
            raise InvalidStructureError("first-exit problems need a tabular chain")

    @property
    def n_params(self) -> int:
        return self.chain.n_params

    @property
    def gamma(self) -> float:
        return self.setting.gamma

    @property
    def terminal(self) -> FrozenSet[int]:
        return frozenset(self.setting.terminal) | frozenset(getattr(self.chain, "terminal", ()))

    @property
    def is_tabular(self) -> bool:
        return bool(self.chain.tabular)

    def check_theta(self, theta) -> np.ndarray:
        return param_vector(theta, self.n_params)
