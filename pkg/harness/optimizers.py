"""Outer-loop step rules: theta <- theta - step(direction)."""

import numpy as np


class GradientDescent:
    def __init__(self, step_size: float):
        self.step_size = float(step_size)

    def step(self, theta: np.ndarray, direction: np.ndarray) -> np.ndarray:
        return theta - self.step_size * direction


class Adam:
    """First/second moment stepping with bias correction."""

    def __init__(self, step_size: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.step_size = float(step_size)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, direction: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(direction)
            self.v = np.zeros_like(direction)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * direction
        self.v = self.beta2 * self.v + (1 - self.beta2) * direction ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, step_size: float):
    if name == "gd":
        return GradientDescent(step_size)
    if name == "adam":
        return Adam(step_size)
    raise ValueError(f"unknown optimizer {name!r}")
