"""
Central finite differences of scalar objectives, used as the verification
oracle for every analytic gradient and Hessian in the package.
"""

import logging
from typing import Callable

import numpy as np

from dso.errors import ProbeError
from dso.exact import objective

logger = logging.getLogger(__name__)

GRADIENT_STEP = 1e-5
HESSIAN_STEP = 1e-3


def relative_error(a, b) -> np.ndarray:
    """|a - b| / max(|b|, 1e-2 * max(1, ||b||_inf)), elementwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    floor = 1e-2 * max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
    return np.abs(a - b) / np.maximum(np.abs(b), floor)


def _steps(theta: np.ndarray, h: float) -> np.ndarray:
    return h * (1.0 + np.abs(theta))


def _probe(func: Callable[[np.ndarray], float], theta: np.ndarray, coordinate: int) -> float:
    value = float(func(theta))
    if not np.isfinite(value):
        raise ProbeError(f"objective is not finite when probing coordinate {coordinate}", coordinate)
    return value


def central_difference_gradient(func: Callable[[np.ndarray], float], theta,
                                h: float = GRADIENT_STEP) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    steps = _steps(theta, h)
    grad = np.zeros(theta.size)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = steps[i]
        grad[i] = (_probe(func, theta + e, i) - _probe(func, theta - e, i)) / (2 * steps[i])
    return grad


def central_difference_hessian(func: Callable[[np.ndarray], float], theta,
                               h: float = HESSIAN_STEP, symmetrize: bool = True) -> np.ndarray:
    """Four-point second differences over the full index grid."""
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    steps = _steps(theta, h)
    E = np.diag(steps)
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            pp = _probe(func, theta + E[i] + E[j], i)
            pm = _probe(func, theta + E[i] - E[j], i)
            mp = _probe(func, theta - E[i] + E[j], i)
            mm = _probe(func, theta - E[i] - E[j], i)
            H[i, j] = (pp - pm - mp + mm) / (4 * steps[i] * steps[j])
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H


def fd_gradient_oracle(problem, theta, h: float = GRADIENT_STEP) -> np.ndarray:
    theta = problem.check_theta(theta)
    logger.debug("finite-difference gradient over %d coordinates", theta.size)
    return central_difference_gradient(lambda th: objective(problem, th), theta, h)


def fd_hessian_oracle(problem, theta, h: float = HESSIAN_STEP, symmetrize: bool = True) -> np.ndarray:
    theta = problem.check_theta(theta)
    return central_difference_hessian(lambda th: objective(problem, th), theta, h, symmetrize)
