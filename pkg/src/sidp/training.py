"""Shared training plumbing: losses, gradients, evaluation and update rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Tape, Tensor, mean, softmax_cross_entropy
from .layers import Sequential


def batch_loss_and_grads(model: Sequential, params: Mapping[str, np.ndarray], x, y
                         ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient w.r.t. every parameter."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with Tape() as tape:
        loss = mean(softmax_cross_entropy(model(leaves, x), y))
    g = tape.backward(loss, list(leaves.values()))
    return loss.item(), {k: g[t] for k, t in leaves.items()}


def accuracy(model: Sequential, params, data, batch_size: int = 500) -> float:
    """Top-1 accuracy; batch-norm models see test batches of ``batch_size``."""
    if len(data) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(data), batch_size):
        x = data.images[start : start + batch_size]
        correct += int((model.predict(params, x) == data.labels[start : start + batch_size]).sum())
    return correct / len(data)


def mean_loss(model: Sequential, params, data, batch_size: int = 500) -> float:
    total = 0.0
    for start in range(0, len(data), batch_size):
        x = data.images[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        total += float(softmax_cross_entropy(model(params, x), y).data.sum())
    return total / max(len(data), 1)


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if self.momentum:
                v = self.velocity.get(k)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[k] = v
                g = v
            params[k] = params[k] - self.lr * g


class Adam:
    def __init__(self, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float, momentum: float = 0.0):
    if name == "sgd":
        return SGD(lr, momentum)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float
    epsilon: float = 0.0
