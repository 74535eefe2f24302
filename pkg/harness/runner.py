"""
Experiment entry points behind the CLI subcommands.

Each run builds its problem from the config, iterates, and writes its outputs
(CSV curve, JSON report and parameters, key-value Z table) under the output
directory. Runs are deterministic given the config seed.
"""

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from dso.errors import ConfigError, RegularizationRequiredError
from dso.estimators import (ConstantFeature, FunctionFeatures, OneHotFeatures, algorithm1_gradient,
                            fit_value_approx)
from dso.exact import exact_gradient, exact_gradient_bottleneck, objective
from dso.finite_difference import fd_gradient_oracle, relative_error
from dso.mdp import build_dmdp_from_smdp, build_dmdp_lmdp_pair, map_smdp
from dso.natural import damped_solve, fisher_matrix, natural_gradient
from dso.policies import SoftmaxPolicy
from dso.problem import FirstExit, InitialDistribution
from dso.rollouts import generate_rollouts
from dso.surrogate import (ExactSurrogate, InnerOptimizerConfig, chain_iteration_step, pco_objective,
                           surrogate_hessian)
from dso.zlearn import (ZLearnSchedule, bellman_residual, solve_z_discounted, solve_z_firstexit,
                        zlearn_baseline, zlearn_greedy)
from harness.config import ZLEARN_METHODS, ExperimentConfig
from harness.optimizers import make_optimizer
from harness.problems import (build_problem, random_lmdp_dmdp_instance, random_tabular_mdp,
                              rollout_seed, zlearn_seed)
from utils.file_utils import write_csv, write_json, write_z_table

logger = logging.getLogger(__name__)

CURVE_FIELDS = ["iter", "J", "grad_norm", "wall_ms", "steps", "J_stderr"]
ZLEARN_FIELDS = ["step", "residual", "rel_error"]
EQUIV_TOL = 1e-10
EQUIV_PAIRS = ("smdp-dmdp", "lmdp-dmdp")


@dataclass
class OptimizeResult:
    curve: List[Dict[str, Any]]
    theta: np.ndarray
    paths: Dict[str, str] = field(default_factory=dict)


@dataclass
class ZLearnRunResult:
    curve: List[Dict[str, Any]]
    energies: np.ndarray
    exact_energies: np.ndarray
    rel_error: float
    report: Dict[str, Any]
    paths: Dict[str, str] = field(default_factory=dict)


def run_gradcheck(config: ExperimentConfig,
                  perturb: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> Dict[str, Any]:
    """Compare the exact gradient with central differences at the initial parameters.

    `perturb` is applied to the analytic gradient before comparison, for fault
    injection. `form_agreement` compares the two exact forms and ignores it.
    """
    built = build_problem(config.problem)
    problem = built.problem
    if not problem.is_tabular:
        raise ConfigError("grad-check needs a tabular problem", "problem.kind")
    theta = built.theta0
    algo = config.algorithm
    direct = exact_gradient(problem, theta)
    expectation_form = exact_gradient(problem, theta, form="expectation")
    analytic = direct if perturb is None else np.asarray(perturb(direct.copy()), dtype=float)
    fd = fd_gradient_oracle(problem, theta, algo.fd_step)
    rel = relative_error(analytic, fd)
    worst = int(np.argmax(rel)) if rel.size else -1
    max_rel = float(rel.max()) if rel.size else 0.0
    failing = [int(i) for i in np.flatnonzero(rel > algo.threshold)]
    report = {
        "name": config.name,
        "problem": built.info,
        "theta": theta,
        "objective": objective(problem, theta),
        "analytic": analytic,
        "finite_difference": fd,
        "relative_error": rel,
        "max_relative_error": max_rel,
        "worst_coordinate": worst,
        "failing_coordinates": failing,
        "form_agreement": float(np.max(np.abs(expectation_form - direct), initial=0.0)),
        "threshold": algo.threshold,
        "passed": not failing,
    }
    path = config.output.path("report")
    write_json(path, report)
    logger.info("Wrote %s", path)
    if failing:
        logger.warning("gradient check failed on coordinates %s (max rel err %.3g)", failing, max_rel)
    else:
        logger.info("gradient check passed, max rel err %.3g", max_rel)
    return report


def _quadratic_features(dim: int) -> FunctionFeatures:
    iu = np.triu_indices(dim)

    def phi(x):
        x = np.asarray(x, dtype=float).reshape(dim)
        return np.concatenate([[1.0], x, np.outer(x, x)[iu]])

    return FunctionFeatures(phi, 1 + dim + iu[0].size)


def value_features(config: ExperimentConfig, problem):
    name = config.algorithm.value_features
    if not config.algorithm.baseline or name == "none":
        return None
    if name == "constant":
        return ConstantFeature()
    if name == "one-hot":
        return OneHotFeatures(problem.chain.n_states)
    return _quadratic_features(problem.chain.state_dim)


class _Sampler:
    """Fresh rollouts each iteration and a value fit carried to the next one."""

    def __init__(self, config: ExperimentConfig, problem):
        self.config = config
        self.problem = problem
        self.features = value_features(config, problem)
        self.baseline = None
        self.steps = 0
        self.last_batch = None

    def batch(self, theta, iteration: int):
        algo = self.config.algorithm
        batch = generate_rollouts(self.problem, theta, algo.batch_size, algo.horizon_cap, algo.termination,
                                  seed=rollout_seed(self.config.problem.seed, iteration),
                                  threads=self.config.resolve_threads())
        self.steps += sum(r.n_transitions for r in batch.rollouts)
        self.last_batch = batch
        return batch

    def refit(self, batch) -> None:
        if self.features is not None:
            self.baseline = fit_value_approx(batch, self.features, self.config.algorithm.ridge)


def _returns_summary(batch):
    returns = np.array([r.returns[0] for r in batch.rollouts])
    stderr = float(returns.std(ddof=1) / np.sqrt(returns.size)) if returns.size > 1 else 0.0
    return float(returns.mean()), stderr


def _inner_config(algo, kappa: float) -> InnerOptimizerConfig:
    return InnerOptimizerConfig(method=algo.inner_method, max_iters=algo.inner_iters, kappa=kappa,
                                damping=algo.damping)


def _newton_direction(problem, theta, grad, damping: float) -> np.ndarray:
    H = surrogate_hessian(problem, theta, "exact")
    try:
        d, _ = damped_solve(H, grad, damping)
    except RegularizationRequiredError:
        logger.warning("surrogate Hessian is not positive definite; taking a gradient step")
        return grad
    return d


def run_optimize(config: ExperimentConfig) -> OptimizeResult:
    """Outer optimization loop; one curve row per iteration, including iteration 0.

    Chain iteration and PCO halve kappa after a rejected step and retry from the
    same theta; the configured kappa is restored once a step is accepted.
    """
    algo = config.algorithm
    if algo.method in ZLEARN_METHODS:
        result = run_zlearn(config)
        return OptimizeResult(result.curve, result.energies, result.paths)
    built = build_problem(config.problem)
    problem = built.problem
    theta = built.theta0.copy()
    optimizer = make_optimizer(algo.optimizer, algo.step_size)
    sampler = _Sampler(config, problem)
    kappa = algo.kappa
    curve = []
    start = time.perf_counter()

    for it in range(algo.iterations + 1):
        J_stderr = 0.0
        last = it == algo.iterations
        if algo.method in ("exact-gd", "newton-surrogate") or (algo.method == "natural" and problem.is_tabular):
            J = objective(problem, theta)
            grad = exact_gradient(problem, theta)
            if not last:
                if algo.method == "exact-gd":
                    theta = optimizer.step(theta, grad)
                elif algo.method == "newton-surrogate":
                    theta = optimizer.step(theta, _newton_direction(problem, theta, grad, algo.damping))
                else:
                    theta = optimizer.step(theta, natural_gradient(problem, theta, grad, damping=algo.damping))
        elif algo.method == "chain-iteration":
            J = objective(problem, theta)
            surrogate = ExactSurrogate(problem, theta)
            grad = surrogate.grad(np.zeros(problem.n_params))
            if not last:
                theta, report = chain_iteration_step(problem, theta, _inner_config(algo, kappa),
                                                     surrogate_factory=lambda _: surrogate)
                kappa = report.kappa if report.rejected else algo.kappa
        else:
            batch = sampler.batch(theta, it)
            J, J_stderr = _returns_summary(batch)
            if problem.is_tabular:
                J, J_stderr = objective(problem, theta), 0.0
            if algo.method == "pco":
                surrogate = pco_objective(problem, theta, batch, sampler.baseline, algo.clip_epsilon)
                grad = surrogate.grad(np.zeros(problem.n_params))
                if not last:
                    theta, report = chain_iteration_step(problem, theta, _inner_config(algo, kappa),
                                                         surrogate_factory=lambda _: surrogate)
                    kappa = report.kappa if report.rejected else algo.kappa
            else:
                grad = algorithm1_gradient(problem, theta, batch, sampler.baseline).mean
                if not last:
                    if algo.method == "natural":
                        fisher = fisher_matrix(problem, theta, "batch", batch)
                        theta = optimizer.step(theta, natural_gradient(problem, theta, grad, fisher,
                                                                       algo.damping))
                    else:
                        theta = optimizer.step(theta, grad)
            sampler.refit(batch)
        wall_ms = int(1000 * (time.perf_counter() - start)) if config.output.wall_clock else 0
        row = {"iter": it, "J": float(J), "grad_norm": float(np.linalg.norm(grad)), "wall_ms": wall_ms,
               "steps": sampler.steps, "J_stderr": float(J_stderr)}
        curve.append(row)
        logger.info("iter %d: J %.6g, |grad| %.3g", it, row["J"], row["grad_norm"])

    paths = {"curve": config.output.path("curve"), "theta": config.output.path("theta")}
    write_csv(paths["curve"], curve, CURVE_FIELDS)
    write_json(paths["theta"], {"name": config.name, "method": algo.method, "theta": theta,
                                "final_J": curve[-1]["J"], "iterations": algo.iterations})
    if config.output.rollouts and sampler.last_batch is not None:
        paths["rollouts"] = config.output.path("rollouts")
        sampler.last_batch.write_jsonl(paths["rollouts"])
    for path in paths.values():
        logger.info("Wrote %s", path)
    return OptimizeResult(curve, theta, paths)


def _compare(first, second, theta, bottleneck: bool) -> Dict[str, float]:
    n = first.chain.n_states
    grad = exact_gradient(first, theta)
    grads = [exact_gradient(second, theta)]
    if bottleneck:
        grads.append(exact_gradient_bottleneck(second, theta))
    return {
        "max_dP": float(np.max(np.abs(first.chain.matrix(theta) - second.chain.matrix(theta)))),
        "max_dL": float(np.max(np.abs(first.cost.value_table(theta, n) - second.cost.value_table(theta, n)))),
        "max_dJ": float(abs(objective(first, theta) - objective(second, theta))),
        "max_dgrad": float(max(np.max(np.abs(grad - g)) for g in grads)),
    }


def run_equivcheck(pair: str, seed: int = 0, n_states: int = 6, n_actions: int = 3,
                   out_dir: Optional[str] = None) -> Dict[str, Any]:
    """Build a random instance of both constructions and compare P, L, J and grad J."""
    if pair not in EQUIV_PAIRS:
        raise ConfigError(f"{pair!r} is not one of {', '.join(EQUIV_PAIRS)}", "pair")
    rng = np.random.default_rng(seed)
    terminal = {n_states - 1}
    setting = FirstExit(terminal)
    w = np.ones(n_states)
    w[n_states - 1] = 0.0
    p0 = InitialDistribution.tabular(w / w.sum())
    if pair == "smdp-dmdp":
        mdp = random_tabular_mdp(rng, n_states, n_actions, terminal)
        policy = SoftmaxPolicy(n_states, n_actions, terminal)
        first = map_smdp(mdp, policy, setting, p0)
        _, second = build_dmdp_from_smdp(mdp, policy, setting, p0)
    else:
        transitions, policy, baseline, state_cost, terminal = random_lmdp_dmdp_instance(rng, n_states)
        second, first = build_dmdp_lmdp_pair(transitions, policy, baseline, state_cost, terminal,
                                             setting, p0)
    theta = rng.normal(0.0, 1.0, first.n_params)
    diffs = _compare(first, second, theta, bottleneck=True)
    report = {"pair": pair, "seed": seed, "n_states": n_states, "theta": theta, **diffs,
              "tolerance": EQUIV_TOL, "passed": all(v < EQUIV_TOL for v in diffs.values())}
    if out_dir:
        path = os.path.join(out_dir, "report.json")
        write_json(path, report)
        logger.info("Wrote %s", path)
    logger.info("%s equivalence %s: %s", pair, "passed" if report["passed"] else "FAILED",
                ", ".join(f"{k}={v:.3g}" for k, v in diffs.items()))
    return report


def run_zlearn(config: ExperimentConfig) -> ZLearnRunResult:
    """Train Z on the gridworld and track the residual and error against the exact solve."""
    algo = config.algorithm
    if config.problem.kind != "gridworld-lmdp":
        raise ConfigError("Z-learning needs a gridworld-lmdp problem", "problem.kind")
    if algo.method not in ZLEARN_METHODS:
        raise ConfigError(f"{algo.method} is not a Z-learning method", "algorithm.method")
    built = build_problem(config.problem)
    spec = built.lmdp
    first_exit = config.problem.setting == "first-exit"
    gamma = 1.0 if first_exit else config.problem.gamma
    exact = solve_z_firstexit(spec) if first_exit else solve_z_discounted(spec, gamma)
    kwargs = dict(schedule=ZLearnSchedule(algo.zlearn_c), seed=zlearn_seed(config.problem.seed),
                  steps=algo.zlearn_steps, gamma=gamma, exact=exact.values,
                  record_every=algo.record_every)
    if algo.method == "zlearn-baseline":
        result = zlearn_baseline(spec, **kwargs)
    else:
        result = zlearn_greedy(spec, mode=algo.zlearn_mode, **kwargs)
    final = result.curve[-1]
    report = {
        "name": config.name,
        "method": algo.method,
        "mode": algo.zlearn_mode if algo.method == "zlearn-greedy" else "baseline",
        "steps": algo.zlearn_steps,
        "n_states": spec.n_states,
        "final_residual": final["residual"],
        "final_rel_error": final["rel_error"],
        "exact_residual": bellman_residual(spec, exact.values, gamma),
        "n_floored": result.n_floored,
    }
    paths = {"curve": config.output.path("curve"), "report": config.output.path("report"),
             "z_table": config.output.path("z_table")}
    write_csv(paths["curve"], result.curve, ZLEARN_FIELDS)
    write_json(paths["report"], report)
    write_z_table(paths["z_table"], result.z.energies)
    for path in paths.values():
        logger.info("Wrote %s", path)
    return ZLearnRunResult(result.curve, result.z.energies, exact.energies, final["rel_error"],
                           report, paths)
