"""Layers, normalization primitives and small model builders.

Normalization acts on pre-activations: ``Dense -> Norm -> ReLU``.  Batch norm
never keeps running averages; every call normalizes with the statistics of
the batch it is given.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, add, as_tensor, matmul, record, relu, reshape

DEFAULT_EPS = 1e-5


# ---------------------------------------------------------------------------
# primitives


def _normalize(op: str, z, gamma, beta, eps: float, axes: tuple[int, ...]) -> Tensor:
    z, gamma, beta = as_tensor(z), as_tensor(gamma), as_tensor(beta)
    if z.data.ndim < 2:
        raise ShapeError(op, f"expected [B, C, ...] input, got {z.shape}")
    B, C = z.shape[:2]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(op, f"gamma/beta must have shape ({C},), got {gamma.shape}, {beta.shape}")
    if eps <= 0:
        raise ValueError(f"{op}: eps must be positive")
    z3 = z.data.reshape(B, C, -1)
    m = z3.mean(axis=axes, keepdims=True)
    centered = z3 - m
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    G = gamma.data[None, :, None]
    out = (G * xhat + beta.data[None, :, None]).reshape(z.shape)

    def vjp(g):
        g3 = g.reshape(B, C, -1)
        dgamma = (g3 * xhat).sum(axis=(0, 2))
        dbeta = g3.sum(axis=(0, 2))
        dxhat = g3 * G
        dz = inv * (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return dz.reshape(z.shape), dgamma, dbeta

    return record(op, out, (z, gamma, beta), vjp)


def layer_norm(z, gamma, beta, eps: float = DEFAULT_EPS) -> Tensor:
    """Normalize each sample over its hidden units, then apply ``gamma * . + beta``."""
    z = as_tensor(z)
    if z.data.ndim < 2 or z.data[0].size < 2:
        raise ShapeError("layer_norm", f"need at least 2 units per sample, got {z.shape}")
    return _normalize("layer_norm", z, gamma, beta, eps, axes=(1, 2))


def batch_norm(z, gamma, beta, eps: float = DEFAULT_EPS) -> Tensor:
    """Normalize each unit (channel) over the current batch only."""
    z = as_tensor(z)
    if z.data.ndim < 2 or z.shape[0] < 2:
        raise ShapeError("batch_norm", f"need a batch of at least 2 rows, got {z.shape}")
    return _normalize("batch_norm", z, gamma, beta, eps, axes=(0, 2))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, weight, bias, padding: str = "valid") -> Tensor:
    """Stride-1 cross-correlation. x [B, Cin, H, W], weight [Cout, Cin, k, k]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-d input and kernel, got {x.shape}, {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, k, k2 = weight.shape
    if Cin != Cin_w or k != k2 or bias.shape != (Cout,):
        raise ShapeError("conv2d", f"input {x.shape} incompatible with kernel {weight.shape}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("conv2d", "'same' padding needs an odd kernel")
        p = k // 2
    elif padding == "valid":
        p = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = _pad(x.data, p)
    Ho, Wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d", f"kernel {k} larger than padded input {xp.shape[2:]}")
    Wt = weight.data
    out = np.zeros((B, Cout, Ho, Wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + Ho, j : j + Wo]
            out += np.einsum("bchw,oc->bohw", patch, Wt[:, :, i, j], optimize=True)
    out += bias.data[None, :, None, None]

    def vjp(g):
        dW = np.empty_like(Wt)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i : i + Ho, j : j + Wo]
                dW[:, :, i, j] = np.einsum("bohw,bchw->oc", g, patch, optimize=True)
                dxp[:, :, i : i + Ho, j : j + Wo] += np.einsum(
                    "bohw,oc->bchw", g, Wt[:, :, i, j], optimize=True
                )
        dx = dxp[:, :, p : p + H, p : p + W] if p else dxp
        return dx, dW, g.sum(axis=(0, 2, 3))

    return record("conv2d", out, (x, weight, bias), vjp)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; H and W must be multiples of ``size``."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d", f"expected 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError("max_pool2d", f"spatial dims {H}x{W} not divisible by {size}")
    Ho, Wo = H // size, W // size
    blocks = (
        x.data.reshape(B, C, Ho, size, Wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, Ho, Wo, size * size)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        d = np.zeros_like(blocks)
        np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
        d = d.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (d,)

    return record("max_pool2d", out, (x,), vjp)


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    kind: str  # weight | bias | gamma | beta


class Layer:
    trainable = False
    norm_kind: str | None = None

    def param_specs(self) -> list[ParamSpec]:
        return []

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def forward(self, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
        raise NotImplementedError


class Dense(Layer):
    trainable = True

    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out

    def param_specs(self):
        return [ParamSpec("weight", (self.n_in, self.n_out), "weight"),
                ParamSpec("bias", (self.n_out,), "bias")]

    def init(self, rng):
        std = np.sqrt(2.0 / self.n_in)
        return {"weight": rng.normal(0.0, std, (self.n_in, self.n_out)),
                "bias": np.zeros(self.n_out)}

    def forward(self, p, x):
        if x.data.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError("dense", f"expected [B, {self.n_in}] input, got {x.shape}")
        return add(matmul(x, p["weight"]), p["bias"])

    def __repr__(self):
        return f"Dense({self.n_in}, {self.n_out})"


class Conv2d(Layer):
    trainable = True

    def __init__(self, c_in: int, c_out: int, kernel: int, padding: str = "valid"):
        self.c_in, self.c_out, self.kernel, self.padding = c_in, c_out, kernel, padding

    def param_specs(self):
        k = self.kernel
        return [ParamSpec("weight", (self.c_out, self.c_in, k, k), "weight"),
                ParamSpec("bias", (self.c_out,), "bias")]

    def init(self, rng):
        fan_in = self.c_in * self.kernel**2
        shape = (self.c_out, self.c_in, self.kernel, self.kernel)
        return {"weight": rng.normal(0.0, np.sqrt(2.0 / fan_in), shape),
                "bias": np.zeros(self.c_out)}

    def forward(self, p, x):
        return conv2d(x, p["weight"], p["bias"], self.padding)

    def __repr__(self):
        return f"Conv2d({self.c_in}, {self.c_out}, k={self.kernel}, {self.padding})"


class _Norm(Layer):
    def __init__(self, n: int, eps: float = DEFAULT_EPS):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.n, self.eps = n, eps

    def param_specs(self):
        return [ParamSpec("gamma", (self.n,), "gamma"), ParamSpec("beta", (self.n,), "beta")]

    def init(self, rng):
        return {"gamma": np.ones(self.n), "beta": np.zeros(self.n)}

    def __repr__(self):
        return f"{type(self).__name__}({self.n})"


class LayerNorm(_Norm):
    norm_kind = "layer"

    def forward(self, p, x):
        return layer_norm(x, p["gamma"], p["beta"], self.eps)


class BatchNorm(_Norm):
    norm_kind = "batch"

    def forward(self, p, x):
        return batch_norm(x, p["gamma"], p["beta"], self.eps)


class ReLU(Layer):
    def forward(self, p, x):
        return relu(x)

    def __repr__(self):
        return "ReLU()"


class Flatten(Layer):
    def forward(self, p, x):
        return reshape(x, (x.shape[0], -1))

    def __repr__(self):
        return "Flatten()"


class MaxPool2d(Layer):
    def __init__(self, size: int = 2):
        self.size = size

    def forward(self, p, x):
        return max_pool2d(x, self.size)

    def __repr__(self):
        return f"MaxPool2d({self.size})"


class Sequential:
    """A stack of layers whose parameters live outside the model.

    Parameters are addressed as ``"<layer index>.<name>"``; ``param_specs``
    fixes their order, which is also the flattening order.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, ...], name: str = "model"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.param_specs: list[ParamSpec] = []
        for i, layer in enumerate(self.layers):
            for spec in layer.param_specs():
                self.param_specs.append(ParamSpec(f"{i}.{spec.name}", spec.shape, spec.kind))
        self.num_params = int(sum(np.prod(s.shape) for s in self.param_specs))

    @property
    def has_batch_norm(self) -> bool:
        return any(layer.norm_kind == "batch" for layer in self.layers)

    @property
    def norm_kinds(self) -> set[str]:
        return {layer.norm_kind for layer in self.layers if layer.norm_kind}

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.init(rng).items():
                params[f"{i}.{k}"] = v
        return params

    def __call__(self, params: Mapping[str, Tensor | np.ndarray], x) -> Tensor:
        h = as_tensor(x)
        if h.shape[1:] != self.input_shape:
            h = reshape(h, (h.shape[0],) + self.input_shape)
        for i, layer in enumerate(self.layers):
            local = {s.name: as_tensor(params[f"{i}.{s.name}"]) for s in layer.param_specs()}
            h = layer.forward(local, h)
        return h

    def predict(self, params, x) -> np.ndarray:
        return self(params, x).data.argmax(axis=1)

    def __repr__(self):
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"Sequential[{self.name}]({inner})"


# ---------------------------------------------------------------------------
# builders


def _norm_layer(kind: str | None, n: int, eps: float) -> list[Layer]:
    if kind is None or kind == "none":
        return []
    if kind == "layer":
        return [LayerNorm(n, eps)]
    if kind == "batch":
        return [BatchNorm(n, eps)]
    raise ValueError(f"unknown norm kind {kind!r}")


def mlp(
    n_in: int = 784,
    hidden: Sequence[int] = (300, 100),
    n_out: int = 10,
    norm: str | None = None,
    eps: float = DEFAULT_EPS,
    norm_output: bool = False,
) -> Sequential:
    """Fully-connected ReLU net; ``norm`` adds LN/BN after every hidden layer
    and, with ``norm_output``, after the logits layer as well."""
    layers: list[Layer] = []
    width = n_in
    for h in hidden:
        layers += [Dense(width, h), *_norm_layer(norm, h, eps), ReLU()]
        width = h
    layers.append(Dense(width, n_out))
    if norm_output:
        layers += _norm_layer(norm, n_out, eps)
    prefix = {"layer": "LN-", "batch": "BN-"}.get(norm or "", "")
    name = prefix + "MLP-" + "-".join(str(h) for h in hidden)
    return Sequential(layers, (n_in,), name=name)


def lenet5(norm: str | None = None, n_out: int = 10, eps: float = DEFAULT_EPS) -> Sequential:
    """LeNet-5 shape for 28x28 inputs: conv6-pool-conv16-pool-120-84-10."""
    layers: list[Layer] = [
        Conv2d(1, 6, 5, padding="same"), *_norm_layer(norm, 6, eps), ReLU(), MaxPool2d(2),
        Conv2d(6, 16, 5), *_norm_layer(norm, 16, eps), ReLU(), MaxPool2d(2),
        Flatten(),
        Dense(400, 120), *_norm_layer(norm, 120, eps), ReLU(),
        Dense(120, 84), *_norm_layer(norm, 84, eps), ReLU(),
        Dense(84, n_out),
    ]
    prefix = {"layer": "LN-", "batch": "BN-"}.get(norm or "", "")
    return Sequential(layers, (1, 28, 28), name=prefix + "LeNet-5")


def build_model(arch: str, norm: str | None = None, **kw) -> Sequential:
    if arch == "mlp":
        return mlp(norm=norm, **kw)
    if arch == "lenet5":
        return lenet5(norm=norm, **kw)
    raise ValueError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# parameter vectors


def flatten_params(model: Sequential, params: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(params[s.name], dtype=np.float64).reshape(-1)
                           for s in model.param_specs])


def unflatten_params(model: Sequential, vec: np.ndarray) -> dict[str, np.ndarray]:
    if vec.shape != (model.num_params,):
        raise ShapeError("unflatten", f"expected {model.num_params} values, got {vec.shape}")
    out, offset = {}, 0
    for s in model.param_specs:
        n = int(np.prod(s.shape))
        out[s.name] = vec[offset : offset + n].reshape(s.shape)
        offset += n
    return out


def param_mask(model: Sequential, kinds: Sequence[str]) -> np.ndarray:
    """Boolean mask over the flat vector selecting parameters of the given kinds."""
    return np.concatenate([np.full(int(np.prod(s.shape)), s.kind in kinds)
                           for s in model.param_specs])


# ---------------------------------------------------------------------------
# scale invariance


def scaled_layer_indices(model: Sequential) -> list[int]:
    """Trainable layers that feed a norm layer.

    A model without norm layers gets the positions its augmented twin would
    normalize: every trainable layer except the last one.
    """
    trainable = [i for i, layer in enumerate(model.layers) if layer.trainable]
    if not model.norm_kinds:
        return trainable[:-1]
    return [i for i in trainable
            if i + 1 < len(model.layers) and model.layers[i + 1].norm_kind is not None]


def scale_layers(model: Sequential, params: Mapping[str, np.ndarray], lam: float,
                 layers: Sequence[int] | None = None) -> dict[str, np.ndarray]:
    """Copy of ``params`` with weight and bias of the chosen layers multiplied by ``lam``."""
    idx = set(scaled_layer_indices(model) if layers is None else layers)
    out = {}
    for s in model.param_specs:
        i = int(s.name.split(".", 1)[0])
        v = np.asarray(params[s.name])
        out[s.name] = v * lam if i in idx and s.kind in ("weight", "bias") else v.copy()
    return out


def scale_invariance_check(model: Sequential, params: Mapping[str, np.ndarray], lam: float,
                           x, layers: Sequence[int] | None = None) -> float:
    """Max abs change of the model output when normalized layers are scaled by ``lam``."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    base = model(params, x).data
    scaled = model(scale_layers(model, params, lam, layers), x).data
    return float(np.max(np.abs(scaled - base)))
