"""Training with weights drawn from N(mu, sigma^2) around learnable means."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor, add, mean, softmax_cross_entropy
from .data import Dataset, batches
from .layers import Sequential
from .training import EpochRecord, accuracy, make_optimizer

log = logging.getLogger(__name__)

NOISY_KINDS = ("weight", "bias")


class RngStream:
    """Deterministic Gaussian source on a counter-based (Philox) generator.

    ``stream`` selects an independent substream of the same seed.
    """

    def __init__(self, seed: int, stream: Sequence[int] | int = ()):
        self.seed = int(seed)
        self.stream = (stream,) if isinstance(stream, int) else tuple(stream)
        self.reset()

    def reset(self) -> None:
        ss = np.random.SeedSequence([self.seed, *self.stream])
        self.generator = np.random.Generator(np.random.Philox(ss))
        self.draws = 0

    def child(self, k: int) -> "RngStream":
        return RngStream(self.seed, self.stream + (k,))

    def normal(self, shape) -> np.ndarray:
        out = self.generator.standard_normal(shape)
        self.draws += out.size
        return out

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream}, draws={self.draws})"


@dataclass
class NoisyParam:
    mu: np.ndarray
    sigma: float
    theta: np.ndarray | None = None

    def __post_init__(self):
        if not self.sigma >= 0 or not math.isfinite(self.sigma):
            raise ValueError("sigma must be finite and nonnegative")
        self.mu = np.asarray(self.mu, dtype=np.float64)


def sample_weights(p: NoisyParam, rng: RngStream) -> Tensor:
    """Draw theta = mu + sigma * xi, store it on ``p`` and return it."""
    xi = rng.normal(p.mu.shape)
    p.theta = p.mu + p.sigma * xi if p.sigma else p.mu.copy()
    return Tensor(p.theta)


def reparametrize(mu: Tensor, sigma: float, rng: RngStream) -> Tensor:
    """theta = mu + sigma * xi recorded on the tape, so d theta / d mu = I."""
    return add(mu, Tensor(sigma * rng.normal(mu.shape)))


def sample_params(model: Sequential, mu: dict[str, np.ndarray], sigma: float,
                  rng: RngStream, kinds: Sequence[str] = NOISY_KINDS) -> dict[str, np.ndarray]:
    """One weight sample for the whole model; only parameters of ``kinds`` get noise."""
    out = {}
    for s in model.param_specs:
        if s.kind in kinds:
            out[s.name] = sample_weights(NoisyParam(mu[s.name], sigma), rng).data
        else:
            out[s.name] = mu[s.name]
    return out


@dataclass
class NoisyTrainResult:
    mu: dict[str, np.ndarray]
    eval_params: dict[str, np.ndarray]
    history: list[EpochRecord] = field(default_factory=list)
    converged: bool = True
    reason: str | None = None
    steps: int = 0

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].test_accuracy if self.history else float("nan")


def epochs_to_reach(history: Sequence[EpochRecord], level: float) -> int | None:
    for rec in history:
        if rec.test_accuracy >= level:
            return rec.epoch
    return None


def noisy_train(
    model: Sequential,
    train: Dataset,
    test: Dataset,
    sigma: float,
    epochs: int,
    rng: RngStream,
    *,
    batch_size: int = 128,
    optimizer: str = "adam",
    lr: float = 1e-3,
    momentum: float = 0.0,
    min_accuracy: float = 0.5,
    kinds: Sequence[str] = NOISY_KINDS,
    params: dict[str, np.ndarray] | None = None,
) -> NoisyTrainResult:
    """Minibatch training of the means with a fresh weight sample every step.

    A non-finite loss stops training; a final accuracy below ``min_accuracy``
    is also reported as non-convergence.  Evaluation uses one weight sample
    per epoch, held fixed over the whole test set.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    mu = dict(params) if params is not None else model.init_params(rng.child(0).generator)
    order_rng = rng.child(1).generator
    train_noise = rng.child(2)
    eval_noise = rng.child(3)
    opt = make_optimizer(optimizer, lr, momentum)
    result = NoisyTrainResult(mu, mu)
    noisy = {s.name for s in model.param_specs if s.kind in kinds}

    for epoch in range(1, epochs + 1):
        losses = []
        for idx in batches(len(train), batch_size, order_rng):
            leaves = {k: Tensor(v, requires_grad=True) for k, v in mu.items()}
            with Tape() as tape:
                theta = {k: reparametrize(t, sigma, train_noise) if k in noisy else t
                         for k, t in leaves.items()}
                loss = mean(softmax_cross_entropy(model(theta, train.images[idx]), train.labels[idx]))
            value = loss.item()
            if not math.isfinite(value):
                result.converged, result.reason = False, "diverged"
                log.info("loss became non-finite at epoch %d", epoch)
                break
            g = tape.backward(loss, list(leaves.values()))
            grads = {k: g[t] for k, t in leaves.items()}
            if not all(np.isfinite(v).all() for v in grads.values()):
                result.converged, result.reason = False, "diverged"
                break
            opt.step(mu, grads)
            result.steps += 1
            losses.append(value)
        if not result.converged:
            result.history.append(EpochRecord(epoch, float("nan"), 0.0))
            break
        result.eval_params = sample_params(model, mu, sigma, eval_noise, kinds)
        acc = accuracy(model, result.eval_params, test)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        result.history.append(EpochRecord(epoch, train_loss, acc))
        log.info("sigma=%g epoch %d loss %.4f acc %.4f", sigma, epoch, train_loss, acc)

    result.mu = mu
    if result.converged and result.history and result.final_accuracy < min_accuracy:
        result.converged, result.reason = False, "no-convergence"
    return result
