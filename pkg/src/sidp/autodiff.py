"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Primitives record themselves on the innermost active :class:`Tape`.  A tape is
a plain ordered list of nodes, so the backward pass is a single reverse sweep::

    with Tape() as tape:
        loss = mean(softmax_cross_entropy(model(params, x), y))
    grads = tape.backward(loss, list(params.values()))
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "as_tensor",
    "record",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "reshape",
    "rows",
    "tsum",
    "mean",
    "softmax_cross_entropy",
    "iter_per_sample_grads",
    "per_sample_backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not fit a primitive's signature."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class Tensor:
    """A dense n-d float64 array.  ``requires_grad`` marks differentiable leaves."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


_local = threading.local()


def _stack() -> list["Tape"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class _Node:
    __slots__ = ("op", "out", "inputs", "vjp")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    Tapes nest; primitives go to the innermost one.  A tape is owned by the
    thread that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op: str, out: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        self.nodes.append(_Node(op, out, tuple(inputs), vjp))
        self._produced.add(id(out))

    def backward(
        self, output: Tensor, wrt: Iterable[Tensor] | None = None
    ) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``output`` with respect to leaves.

        With ``wrt`` given, every listed tensor gets an entry (zeros when the
        output does not depend on it).  Otherwise all reached leaves that
        require grad are returned.
        """
        if output.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        if id(output) not in self._produced:
            raise ValueError("output was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None or not any(t.requires_grad for t in node.inputs):
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._produced:
                    leaves[key] = t

        if wrt is None:
            return {t: grads[k] for k, t in leaves.items()}
        out = {}
        for t in wrt:
            g = grads.get(id(t)) if id(t) not in self._produced else None
            out[t] = g if g is not None else np.zeros_like(t.data)
        return out


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out_data`` as a Tensor and log the primitive on the active tape.

    ``vjp`` maps the output cotangent to one cotangent (or None) per input.
    """
    out = Tensor(out_data)
    stack = _stack()
    if stack:
        out.requires_grad = any(t.requires_grad for t in inputs)
        stack[-1]._record(op, out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return record("matmul", A @ B, (a, b), vjp)


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a scalar or a bias vector over the last axis."""
    if _is_scalar(b):
        a = as_tensor(a)
        c = float(b)
        return record("add_scalar", a.data + c, (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return record("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.data.ndim - 1))
        return record("bias_add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError("add", f"incompatible shapes {a.shape} and {b.shape}")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        c = float(b)
        return record("mul_scalar", a.data * c, (a,), lambda g: (g * c,))
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", f"incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", str(exc)) from None
    old = a.shape
    return record("reshape", out, (a,), lambda g: (g.reshape(old),))


def rows(a, index) -> Tensor:
    """Select leading-axis entries, e.g. ``rows(losses, slice(0, L))``."""
    a = as_tensor(a)
    if a.data.ndim == 0:
        raise ShapeError("rows", "cannot index a scalar")
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record("rows", np.array(out, copy=True), (a,), vjp)


def tsum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, np.asarray(g).item()),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean", "empty input")
    shape = a.shape
    return record("mean", np.array(a.data.mean()), (a,), lambda g: (np.full(shape, np.asarray(g).item() / n),))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-example losses ``-log softmax(logits)[label]`` of shape [B]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(
            "softmax_cross_entropy", f"logits {logits.shape} vs {labels.shape[0]} labels"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("softmax_cross_entropy", "label out of range")
    Z = logits.data
    shifted = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    idx = np.arange(labels.size)
    losses = -logp[idx, labels]

    def vjp(g):
        d = np.exp(logp)
        d[idx, labels] -= 1.0
        return (d * g[:, None],)

    return record("softmax_cross_entropy", losses, (logits,), vjp)


# ---------------------------------------------------------------------------
# per-example gradients


def iter_per_sample_grads(
    loss_fn: Callable[[int], Tensor], leaves: Sequence[Tensor], n: int
) -> Iterator[np.ndarray]:
    """Yield one flattened gradient per example by running a backward pass each.

    ``loss_fn(i)`` builds the scalar loss for example ``i`` and must not couple
    examples (each call sees only its own microbatch).
    """
    for i in range(n):
        with Tape() as tape:
            loss = loss_fn(i)
        g = tape.backward(loss, leaves)
        yield np.concatenate([g[t].reshape(-1) for t in leaves])


def per_sample_backward(
    loss_fn: Callable[[int], Tensor], leaves: Sequence[Tensor], n: int
) -> np.ndarray:
    """Stack of per-example gradient vectors, shape [n, num_params]."""
    total = sum(t.size for t in leaves)
    out = np.empty((n, total))
    for i, g in enumerate(iter_per_sample_grads(loss_fn, leaves, n)):
        out[i] = g
    return out
