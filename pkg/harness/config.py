"""
Experiment configuration.

A config is one JSON document with `problem`, `algorithm` and optional
`output` sections. Parsing rejects unknown fields and reports every problem
with a dotted field path; `to_dict` and `from_dict` round-trip exactly.
"""

import os
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields
from typing import Any, Dict, Optional, Tuple

from dso.errors import ConfigError
from dso.rollouts import MODES
from utils.file_utils import read_json

PROBLEM_KINDS = ("softmax-tabular", "gridworld-lmdp", "gaussian-linear", "smdp-random",
                 "timevarying-tabular")
SETTINGS = ("episodic", "first-exit", "average", "time-varying")
METHODS = ("exact-gd", "alg1-sgd", "chain-iteration", "pco", "natural", "newton-surrogate",
           "zlearn-baseline", "zlearn-greedy")
ZLEARN_METHODS = ("zlearn-baseline", "zlearn-greedy")
# methods that need exact values, so a tabular chain
EXACT_METHODS = ("exact-gd", "chain-iteration", "newton-surrogate")
SAMPLED_METHODS = ("alg1-sgd", "pco")
OPTIMIZERS = ("gd", "adam")
VALUE_FEATURES = ("one-hot", "constant", "quadratic", "none")
INNER_METHODS = ("gd", "newton")
ZLEARN_MODES = ("exact-G", "double-sample")

ALLOWED_SETTINGS = {
    "softmax-tabular": ("episodic", "first-exit", "average"),
    "smdp-random": ("episodic", "first-exit", "average"),
    "gridworld-lmdp": ("first-exit", "episodic"),
    "gaussian-linear": ("episodic",),
    "timevarying-tabular": ("time-varying",),
}

DEFAULT_OUT_DIR = "results"


@dataclass(frozen=True)
class ProblemSpec:
    kind: str
    variant: str = "canonical"
    n_states: int = 6
    n_actions: int = 3
    size: int = 5
    gamma: float = 0.9
    setting: str = "first-exit"
    horizon: int = 10
    seed: int = 0
    step_cost: float = 0.003
    obstacle_fraction: float = 0.0
    state_dim: int = 1
    theta0: Optional[Tuple[float, ...]] = None

    def validate(self, path: str = "problem") -> None:
        _choice(self.kind, PROBLEM_KINDS, f"{path}.kind")
        _choice(self.variant, ("canonical", "random"), f"{path}.variant")
        _choice(self.setting, SETTINGS, f"{path}.setting")
        if self.setting not in ALLOWED_SETTINGS[self.kind]:
            raise ConfigError(f"{self.kind} problems support settings {ALLOWED_SETTINGS[self.kind]}",
                              f"{path}.setting")
        if self.setting == "episodic":
            _check(0.0 <= self.gamma < 1.0, "episodic gamma must lie in [0, 1)", f"{path}.gamma")
        else:
            _check(0.0 < self.gamma <= 1.0, "gamma must lie in (0, 1]", f"{path}.gamma")
        _check(self.n_states >= 2, "need at least 2 states", f"{path}.n_states")
        _check(self.n_actions >= 1, "need at least 1 action", f"{path}.n_actions")
        _check(self.size >= 2, "grid side must be at least 2", f"{path}.size")
        _check(self.horizon >= 0, "horizon must be nonnegative", f"{path}.horizon")
        _check(self.seed >= 0, "seed must be nonnegative", f"{path}.seed")
        _check(self.step_cost >= 0.0, "step cost must be nonnegative", f"{path}.step_cost")
        _check(0.0 <= self.obstacle_fraction < 1.0, "obstacle fraction must lie in [0, 1)",
               f"{path}.obstacle_fraction")
        _check(self.state_dim >= 1, "state dimension must be positive", f"{path}.state_dim")


@dataclass(frozen=True)
class AlgorithmSpec:
    method: str
    iterations: int = 100
    step_size: float = 0.1
    optimizer: str = "gd"
    batch_size: int = 256
    horizon_cap: int = 10_000
    termination: str = "terminal"
    clip_epsilon: float = 0.2
    damping: float = 1e-3
    baseline: bool = True
    value_features: str = "one-hot"
    ridge: float = 1e-6
    kappa: float = 1.0
    inner_method: str = "gd"
    inner_iters: int = 100
    zlearn_steps: int = 100_000
    zlearn_mode: str = "exact-G"
    zlearn_c: float = 100.0
    record_every: int = 1000
    threads: Optional[int] = None
    fd_step: float = 1e-5
    threshold: float = 1e-5

    def validate(self, path: str = "algorithm") -> None:
        _choice(self.method, METHODS, f"{path}.method")
        _choice(self.optimizer, OPTIMIZERS, f"{path}.optimizer")
        _choice(self.termination, MODES, f"{path}.termination")
        _choice(self.value_features, VALUE_FEATURES, f"{path}.value_features")
        _choice(self.inner_method, INNER_METHODS, f"{path}.inner_method")
        _choice(self.zlearn_mode, ZLEARN_MODES, f"{path}.zlearn_mode")
        _check(self.iterations >= 0, "iterations must be nonnegative", f"{path}.iterations")
        _check(self.step_size > 0.0, "step size must be positive", f"{path}.step_size")
        _check(self.batch_size >= 1, "batch size must be at least 1", f"{path}.batch_size")
        _check(self.horizon_cap >= 1, "horizon cap must be at least 1", f"{path}.horizon_cap")
        _check(0.0 < self.clip_epsilon < 1.0, "clip epsilon must lie in (0, 1)", f"{path}.clip_epsilon")
        _check(self.damping >= 0.0, "damping must be nonnegative", f"{path}.damping")
        _check(self.ridge >= 0.0, "ridge must be nonnegative", f"{path}.ridge")
        _check(0.0 <= self.kappa <= 1.0, "kappa must lie in [0, 1]", f"{path}.kappa")
        _check(self.inner_iters >= 1, "inner iterations must be at least 1", f"{path}.inner_iters")
        _check(self.zlearn_steps >= 0, "Z-learning steps must be nonnegative", f"{path}.zlearn_steps")
        _check(self.zlearn_c > 0.0, "schedule constant must be positive", f"{path}.zlearn_c")
        _check(self.record_every >= 0, "record interval must be nonnegative", f"{path}.record_every")
        _check(self.threads is None or self.threads >= 1, "threads must be at least 1",
               f"{path}.threads")
        _check(self.fd_step > 0.0, "finite-difference step must be positive", f"{path}.fd_step")
        _check(self.threshold > 0.0, "threshold must be positive", f"{path}.threshold")


@dataclass(frozen=True)
class OutputSpec:
    out_dir: Optional[str] = None
    curve: str = "curve.csv"
    report: str = "report.json"
    theta: str = "theta.json"
    z_table: str = "z_table.txt"
    rollouts: Optional[str] = None
    # wall_ms is written as 0 unless enabled, so reruns stay byte-identical
    wall_clock: bool = False

    def validate(self, path: str = "output") -> None:
        for name in ("curve", "report", "theta", "z_table"):
            _check(bool(getattr(self, name)), "file name must not be empty", f"{path}.{name}")

    def resolve_dir(self) -> str:
        return self.out_dir or os.getenv("DSO_OUT_DIR", DEFAULT_OUT_DIR)

    def path(self, name: str) -> str:
        return os.path.join(self.resolve_dir(), getattr(self, name))


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec
    algorithm: AlgorithmSpec
    output: OutputSpec = field(default_factory=OutputSpec)
    name: str = "experiment"

    def validate(self) -> "ExperimentConfig":
        self.problem.validate()
        self.algorithm.validate()
        self.output.validate()
        method, kind = self.algorithm.method, self.problem.kind
        if method in ZLEARN_METHODS and kind != "gridworld-lmdp":
            raise ConfigError(f"{method} needs a gridworld-lmdp problem, got {kind}", "algorithm.method")
        if kind == "gaussian-linear" and (method in EXACT_METHODS or method in ZLEARN_METHODS):
            raise ConfigError(f"{method} needs a tabular problem", "algorithm.method")
        if self.problem.setting == "average" and method in SAMPLED_METHODS:
            raise ConfigError(f"{method} needs an episodic, first-exit or time-varying setting",
                              "algorithm.method")
        if kind == "gaussian-linear":
            if self.algorithm.termination == "terminal":
                raise ConfigError("gaussian-linear rollouts have no terminal states; use geometric or horizon",
                                  "algorithm.termination")
            if self.algorithm.baseline and self.algorithm.value_features == "one-hot":
                raise ConfigError("one-hot features need a tabular problem", "algorithm.value_features")
        elif self.algorithm.value_features == "quadratic":
            raise ConfigError("quadratic features need a continuous-state problem",
                              "algorithm.value_features")
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(cls, data, "")
        for required in ("problem", "algorithm"):
            if required not in data:
                raise ConfigError("required section is missing", required)
        config = cls(
            problem=_build(ProblemSpec, data["problem"], "problem"),
            algorithm=_build(AlgorithmSpec, data["algorithm"], "algorithm"),
            output=_build(OutputSpec, data.get("output", {}), "output"),
            name=_coerce(data.get("name", "experiment"), str, "name"),
        )
        return config.validate()

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        theta0 = data["problem"]["theta0"]
        data["problem"]["theta0"] = None if theta0 is None else list(theta0)
        return data

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None,
                       threads: Optional[int] = None) -> "ExperimentConfig":
        """Apply command-line overrides; None leaves a field unchanged."""
        data = self.to_dict()
        if seed is not None:
            data["problem"]["seed"] = seed
        if out_dir is not None:
            data["output"]["out_dir"] = out_dir
        if threads is not None:
            data["algorithm"]["threads"] = threads
        return ExperimentConfig.from_dict(data)

    def resolve_threads(self) -> int:
        if self.algorithm.threads is not None:
            return self.algorithm.threads
        return max(1, int(os.getenv("DSO_THREADS", "1")))


def load_config(path) -> ExperimentConfig:
    try:
        data = read_json(path)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except ValueError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return ExperimentConfig.from_dict(data)


def _check(ok: bool, message: str, path: str) -> None:
    if not ok:
        raise ConfigError(message, path)


def _choice(value, allowed, path: str) -> None:
    if value not in allowed:
        raise ConfigError(f"{value!r} is not one of {', '.join(allowed)}", path)


def _reject_unknown(cls, data: Dict[str, Any], path: str) -> None:
    known = {f.name for f in fields(cls)}
    for key in sorted(data):
        if key not in known:
            raise ConfigError("unknown field", f"{path}.{key}" if path else key)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError("section must be a JSON object", path)
    _reject_unknown(cls, data, path)
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], f"{path}.{f.name}")
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError("required field is missing", f"{path}.{f.name}")
    return cls(**kwargs)


def _coerce(value, hint, path: str):
    """Check a JSON value against a field annotation; ints are accepted for floats."""
    if typing.get_origin(hint) is typing.Union:
        inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
        return None if value is None else _coerce(value, inner, path)
    if typing.get_origin(hint) is tuple:
        if not isinstance(value, list):
            raise ConfigError("expected a list of numbers", path)
        return tuple(_coerce(v, float, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected true or false", path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer", path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("expected a number", path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError("expected a string", path)
        return value
    raise ConfigError(f"unsupported field type {hint}", path)
