import numpy as np
import pytest

from harness.config import ProblemSpec
from harness.problems import canonical_exit_problem, random_softmax_problem


def softmax_problem(setting: str, seed: int = 0, n_states: int = 6, gamma: float = 0.9):
    """Random row-softmax problem with table plus quadratic costs."""
    spec = ProblemSpec(kind="softmax-tabular", variant="random", n_states=n_states,
                       setting=setting, gamma=gamma, seed=seed)
    return random_softmax_problem(spec, np.random.default_rng(seed))


def random_theta(problem, seed: int = 0, scale: float = 0.5) -> np.ndarray:
    return np.random.default_rng(1000 + seed).normal(0.0, scale, problem.n_params)


@pytest.fixture
def canonical():
    return canonical_exit_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _isolated_output(tmp_path, monkeypatch):
    # keep stray writes out of the working tree
    monkeypatch.setenv("DSO_OUT_DIR", str(tmp_path / "results"))
    monkeypatch.setenv("DSO_LOG_FILE", str(tmp_path / "dso.log"))
