"""Private training: per-sample clipping, DPSGD and scale-invariant DPSGD.

DPSGD adds the Gaussian noise to the update, so it accumulates in the
weights.  SI-DPSGD runs clipped SGD on mean parameters ``mu`` and releases
``theta = mu + (eta/L) N(0, C^2 z^2)`` drawn fresh after every step; forward
and backward passes use ``theta``.  Only ``theta`` may leave the process.
"""

from __future__ import annotations

import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from .accountant import epsilon_for
from .autodiff import Tape, Tensor, mean, rows, softmax_cross_entropy
from .data import Dataset, LotSampler, PublicBatch
from .layers import Sequential, flatten_params, unflatten_params
from .noisy import RngStream
from .training import EpochRecord, accuracy

log = logging.getLogger(__name__)

METHODS = ("dpsgd", "sidpsgd", "sidpsgd-bn")


class CouplingError(RuntimeError):
    """Per-sample gradients requested for a model whose batch norm couples samples."""


def clip(g: np.ndarray, C: float) -> np.ndarray:
    """Scale ``g`` to L2 norm at most ``C``; direction is unchanged."""
    if C <= 0:
        raise ValueError("clip norm must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= C:
        return g
    return g * (C / norm)


@dataclass(frozen=True)
class DpTrainConfig:
    lr: float | Callable[[int], float]
    lot_size: int
    n: int
    steps: int
    z: float
    clip_norm: float
    delta: float = 1e-5

    def __post_init__(self):
        if not 0 < self.lot_size <= self.n:
            raise ValueError("lot size must satisfy 0 < L <= N")
        if self.steps < 0:
            raise ValueError("step count must be nonnegative")
        if self.z < 0:
            raise ValueError("noise multiplier must be nonnegative")
        if self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")
        if not callable(self.lr) and self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def q(self) -> float:
        return self.lot_size / self.n

    def eta(self, t: int) -> float:
        eta = self.lr(t) if callable(self.lr) else self.lr
        if eta <= 0:
            raise ValueError(f"learning rate at step {t} is not positive")
        return float(eta)

    def noise_std(self, t: int) -> float:
        """Per-coordinate std of the weight noise at step ``t``: eta C z / L."""
        return self.eta(t) * self.clip_norm * self.z / self.lot_size


@dataclass
class ParamState:
    mu: np.ndarray
    theta: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, vec: np.ndarray) -> "ParamState":
        return cls(vec.copy(), vec.copy(), 0)


@dataclass
class StepAudit:
    lot_size: int
    max_norm: float
    clipped: int


def clipped_mean(grads: Iterable[np.ndarray], C: float, L: int, dim: int
                 ) -> tuple[np.ndarray, StepAudit]:
    """Sum of clipped per-sample gradients divided by the nominal lot size."""
    total = np.zeros(dim)
    count, max_norm, clipped = 0, 0.0, 0
    for g in grads:
        c = clip(g, C)
        if c is not g:
            clipped += 1
        max_norm = max(max_norm, float(np.linalg.norm(c)))
        total += c
        count += 1
    return total / L, StepAudit(count, max_norm, clipped)


def dpsgd_step(state: ParamState, grads: Iterable[np.ndarray], cfg: DpTrainConfig,
               rng: RngStream) -> tuple[ParamState, StepAudit]:
    """theta <- theta - eta * g + (eta/L) N(0, C^2 z^2); noise accumulates."""
    eta = cfg.eta(state.t)
    g, audit = clipped_mean(grads, cfg.clip_norm, cfg.lot_size, state.theta.size)
    noise = rng.normal(state.theta.shape) * (cfg.clip_norm * cfg.z)
    theta = state.theta - eta * g + (eta / cfg.lot_size) * noise
    return ParamState(theta.copy(), theta, state.t + 1), audit


def sidpsgd_step(state: ParamState, grads: Iterable[np.ndarray], cfg: DpTrainConfig,
                 rng: RngStream) -> tuple[ParamState, StepAudit]:
    """mu <- mu - eta * g;  theta <- mu + (eta/L) N(0, C^2 z^2), drawn fresh."""
    eta = cfg.eta(state.t)
    g, audit = clipped_mean(grads, cfg.clip_norm, cfg.lot_size, state.mu.size)
    mu = state.mu - eta * g
    noise = rng.normal(mu.shape) * (cfg.clip_norm * cfg.z)
    theta = mu + (eta / cfg.lot_size) * noise
    return ParamState(mu, theta, state.t + 1), audit


STEP_RULES = {"dpsgd": dpsgd_step, "sidpsgd": sidpsgd_step, "sidpsgd-bn": sidpsgd_step}


# ---------------------------------------------------------------------------
# gradients


def per_sample_gradients(model: Sequential, theta: np.ndarray, x: np.ndarray, y: np.ndarray,
                         public: PublicBatch | None = None) -> Iterator[np.ndarray]:
    """One flat gradient per example, evaluated at the weights ``theta``.

    The gradient w.r.t. the means equals the gradient w.r.t. theta because
    theta = mu + noise.  With batch norm, example i is run as the microbatch
    ``{x_i} + public`` and only row 0 enters the loss, so no other private
    example touches its gradient.
    """
    if model.has_batch_norm and public is None:
        raise CouplingError("batch norm couples examples; pass a public batch")
    params = unflatten_params(model, theta)
    leaves = [Tensor(params[s.name], requires_grad=True) for s in model.param_specs]
    named = {s.name: t for s, t in zip(model.param_specs, leaves)}
    for i in range(len(y)):
        if public is not None:
            xb = np.concatenate([x[i : i + 1], public.images])
        else:
            xb = x[i : i + 1]
        with Tape() as tape:
            losses = softmax_cross_entropy(rows(model(named, xb), slice(0, 1)), y[i : i + 1])
            loss = mean(losses)
        g = tape.backward(loss, leaves)
        yield np.concatenate([g[t].reshape(-1) for t in leaves])


def lot_gradient_bn(model: Sequential, theta: np.ndarray, x: np.ndarray, y: np.ndarray,
                    public: PublicBatch) -> np.ndarray:
    """Gradient of the mean loss over the first L rows of ``x + public`` (shared statistics)."""
    params = unflatten_params(model, theta)
    leaves = [Tensor(params[s.name], requires_grad=True) for s in model.param_specs]
    named = {s.name: t for s, t in zip(model.param_specs, leaves)}
    xb = np.concatenate([x, public.images])
    with Tape() as tape:
        loss = mean(softmax_cross_entropy(rows(model(named, xb), slice(0, len(y))), y))
    g = tape.backward(loss, leaves)
    return np.concatenate([g[t].reshape(-1) for t in leaves])


# ---------------------------------------------------------------------------
# inference


def sidpsgd_bn_infer(model: Sequential, params: Mapping[str, np.ndarray], x: np.ndarray,
                     public: PublicBatch) -> np.ndarray:
    """Logits for one test point computed as f(theta, {x} + public)[0]."""
    xb = np.concatenate([np.asarray(x)[None], public.images])
    return model(params, xb).data[0]


def public_accuracy(model: Sequential, params, data: Dataset, public: PublicBatch) -> float:
    correct = 0
    for i in range(len(data)):
        correct += int(sidpsgd_bn_infer(model, params, data.images[i], public).argmax()
                       == data.labels[i])
    return correct / max(len(data), 1)


def evaluate(model: Sequential, params, data: Dataset, public: PublicBatch | None = None) -> float:
    if model.has_batch_norm and public is not None:
        return public_accuracy(model, params, data, public)
    return accuracy(model, params, data)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class DpTrainResult:
    model: Sequential
    theta: np.ndarray
    history: list[EpochRecord] = field(default_factory=list)
    audits: list[StepAudit] = field(default_factory=list)
    steps: int = 0
    converged: bool = True
    reason: str | None = None
    # kept in memory only; never written by save_release
    _mu: np.ndarray | None = field(default=None, repr=False)

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].test_accuracy if self.history else float("nan")

    def released_params(self) -> dict[str, np.ndarray]:
        return unflatten_params(self.model, self.theta)


def dp_train(
    model: Sequential,
    train: Dataset,
    test: Dataset,
    cfg: DpTrainConfig,
    rng: RngStream,
    method: str = "sidpsgd",
    public: PublicBatch | None = None,
    steps_per_epoch: int | None = None,
    params: dict[str, np.ndarray] | None = None,
    grad_hook: Callable[[int, ParamState], Iterable[np.ndarray]] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> DpTrainResult:
    """Run ``cfg.steps`` private steps with Poisson lots, evaluating once per epoch.

    ``grad_hook(t, state)``, when given, replaces the per-sample gradients
    (used to drive the update rules with a fixed gradient sequence).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "sidpsgd-bn":
        if public is None:
            raise ValueError("sidpsgd-bn needs a public batch")
        if len(public) < 2:
            raise ValueError("public batch needs at least 2 points")
        public.check_disjoint(train)
    if public is not None and not model.has_batch_norm:
        log.info("model has no batch norm; the public batch is unused")
        public = None
    if cfg.n != len(train):
        raise ValueError(f"config says N={cfg.n} but the training set has {len(train)} points")

    init = params if params is not None else model.init_params(rng.child(0).generator)
    state = ParamState.initial(flatten_params(model, init))
    sampler = LotSampler(cfg.q, rng.child(1).generator)
    noise = rng.child(2)
    step_rule = STEP_RULES[method]
    per_epoch = steps_per_epoch or max(1, round(cfg.n / cfg.lot_size))
    result = DpTrainResult(model, state.theta)

    for t in range(cfg.steps):
        if grad_hook is not None:
            grads = grad_hook(t, state)
        else:
            idx = sampler.sample(cfg.n)
            grads = per_sample_gradients(model, state.theta, train.images[idx],
                                         train.labels[idx], public)
        state, audit = step_rule(state, grads, cfg, noise)
        result.audits.append(audit)
        if not np.isfinite(state.theta).all():
            result.converged, result.reason = False, "diverged"
            break
        if (t + 1) % per_epoch == 0 or t + 1 == cfg.steps:
            epoch = (t + 1 + per_epoch - 1) // per_epoch
            released = unflatten_params(model, state.theta)
            acc = evaluate(model, released, test, public)
            eps = epsilon_for(cfg.q, cfg.z, t + 1, cfg.delta) if cfg.z > 0 else math.inf
            loss = _train_loss(model, released, train, public)
            rec = EpochRecord(epoch, loss, acc, eps)
            result.history.append(rec)
            if on_epoch is not None:
                on_epoch(rec)
            log.info("%s epoch %d acc %.4f eps %.3f", method, epoch, acc, eps)
        result.steps = t + 1

    result.theta = state.theta
    result._mu = state.mu
    return result


def _train_loss(model, params, train: Dataset, public, n: int = 500) -> float:
    """Mean loss on a fixed slice of the training set (monitoring only)."""
    sub = train.subset(slice(0, min(n, len(train))))
    if model.has_batch_norm and public is not None:
        xb = np.concatenate([sub.images, public.images])
        logits = model(params, xb).data[: len(sub)]
    else:
        logits = model(params, sub.images).data
    return float(softmax_cross_entropy(logits, sub.labels).data.mean())


def sidpsgd_bn_train(model: Sequential, train: Dataset, test: Dataset, public: PublicBatch,
                     cfg: DpTrainConfig, rng: RngStream, **kw) -> DpTrainResult:
    if not model.has_batch_norm:
        log.warning("model has no batch norm; the public batch is unused")
    return dp_train(model, train, test, cfg, rng, method="sidpsgd-bn", public=public, **kw)


# ---------------------------------------------------------------------------
# release


def save_release(path, model: Sequential, theta: np.ndarray, eps: float,
                 public: PublicBatch | None = None, extra: Mapping | None = None) -> None:
    """Write the released weights.  The file holds theta, shapes, eps and the
    public-batch digest; mean parameters are never written."""
    params = unflatten_params(model, theta)
    meta = {
        "format": "sidp-release-1",
        "model": model.name,
        "layers": [repr(layer) for layer in model.layers],
        "shapes": {s.name: list(s.shape) for s in model.param_specs},
        "eps": eps,
        "norm_eps": [getattr(layer, "eps", None) for layer in model.layers
                     if layer.norm_kind is not None],
        "public_sha256": public.digest if public is not None else None,
        **(dict(extra) if extra else {}),
    }
    path = Path(path)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        for s in model.param_specs:
            arr = np.ascontiguousarray(params[s.name], dtype="<f8")
            zf.writestr(f"theta/{s.name}.bin", arr.tobytes())


def load_release(path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        params = {}
        for name, shape in meta["shapes"].items():
            raw = zf.read(f"theta/{name}.bin")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return meta, params
