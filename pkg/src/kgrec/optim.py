"""Minimal in-place optimizers shared by the graph and image trainers."""

from __future__ import annotations

import numpy as np


class GradientDescent:
    """Plain gradient descent: p -= lr * g."""

    def __init__(self, learning_rate: float):
        self.lr = learning_rate

    def update(self, key: str, param: np.ndarray, grad: np.ndarray) -> None:
        param -= self.lr * grad


class RmsProp:
    """RMSProp with running mean of squared gradients, keyed per parameter."""

    def __init__(self, learning_rate: float, decay: float = 0.9, eps: float = 1e-8):
        self.lr = learning_rate
        self.decay = decay
        self.eps = eps
        self._mean_sq: dict[str, np.ndarray] = {}

    def update(self, key: str, param: np.ndarray, grad: np.ndarray) -> None:
        ms = self._mean_sq.get(key)
        if ms is None:
            ms = np.zeros_like(param)
            self._mean_sq[key] = ms
        ms *= self.decay
        ms += (1.0 - self.decay) * grad * grad
        param -= self.lr * grad / (np.sqrt(ms) + self.eps)


def make_optimizer(name: str, learning_rate: float):
    if name == "gd":
        return GradientDescent(learning_rate)
    if name == "rmsprop":
        return RmsProp(learning_rate)
    raise ValueError(f"unknown optimizer: {name!r}")
