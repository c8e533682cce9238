"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Graph`.  When no
graph is active (or no input requires a gradient) they simply compute, which is
the fast path used for inference and analysis.

    >>> w = Tensor(np.eye(2), requires_grad=True)
    >>> with Graph() as g:
    ...     loss = sum(matmul(w, Tensor([[1.0], [2.0]])))
    >>> g.backward(loss)
    >>> w.grad
    array([[1., 2.],
           [1., 2.]])
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "ContractError",
    "Tensor",
    "Graph",
    "backward",
    "pullback",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "exp",
    "log",
    "power",
    "gelu",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "swap_last",
    "index",
    "concat",
    "softmax_rows",
    "mean_subtract",
    "amax",
    "sort_desc",
    "mse",
    "cross_entropy",
    "layer_norm",
    "OptimState",
    "adamw_step",
    "lr_at",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- graph / tape


@dataclass(slots=True)
class Node:
    tag: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list["Graph"]:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def current_graph() -> "Graph | None":
    s = _stack()
    return s[-1] if s else None


@dataclass
class Graph:
    """Explicit tape of operation records, in the order they were executed."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def backward(graph: Graph, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    _backprop(graph, root, np.ones_like(root.data))


def pullback(graph: Graph, output: Tensor, cotangent) -> None:
    """Vector-Jacobian product: accumulate ``cotangent . d(output)/d(leaf)`` into leaves."""
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != output.shape:
        raise ShapeError(f"cotangent shape {cot.shape} != output shape {output.shape}")
    _backprop(graph, output, cot)


def _backprop(graph: Graph, root: Tensor, seed: np.ndarray) -> None:
    if not root.requires_grad:
        return
    produced = {id(n.output) for n in graph.nodes}
    grads: dict[int, np.ndarray] = {id(root): seed}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.vjp(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = g if prev is None else prev + g
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
    if id(root) not in produced:
        root.grad = seed.copy() if root.grad is None else root.grad + seed


def _make(tag: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    g = current_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.record(Node(tag, inputs, out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**p
    return _make("power", out, (a,), lambda g: (g * p * a.data ** (p - 1),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _make("gelu", a.data * cdf, (a,), vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        if b.ndim == 2 and a.ndim > 2:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def vjp(g):
        ga = gb = None
        flat = b.ndim == 2 and a.ndim > 2  # fold batch axes into one 2-D product
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------- reductions / shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return _make("swap_last", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make("index", a.data[idx], (a,), vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _make("concat", out, ts, vjp)


# ---------------------------------------------------------------- row operations


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis, stabilized by subtracting the row max."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax_rows", out, (a,), vjp)


def mean_subtract(a) -> Tensor:
    a = as_tensor(a)
    out = a.data - a.data.mean(axis=-1, keepdims=True)
    return _make(
        "mean_subtract", out, (a,), lambda g: (g - g.mean(axis=-1, keepdims=True),)
    )


def amax(a, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximizer."""
    a = as_tensor(a)
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make("amax", out, (a,), vjp)


def sort_desc(a) -> Tensor:
    """Sort the last axis in descending order (stable)."""
    a = as_tensor(a)
    order = np.argsort(-a.data, axis=-1, kind="stable")
    out = np.take_along_axis(a.data, order, axis=-1)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, order, g, axis=-1)
        return (full,)

    return _make("sort_desc", out, (a,), vjp)


def layer_norm(a, gain, bias, eps: float = 1e-6) -> Tensor:
    c = mean_subtract(a)
    var = mean(mul(c, c), axis=-1, keepdims=True)
    return add(mul(mul(c, power(add(var, eps), -0.5)), gain), bias)


# ---------------------------------------------------------------- losses


def mse(a, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (B, C) against integer ``labels``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(labels.size)
    out = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / labels.size,)

    return _make("cross_entropy", np.asarray(out), (logits,), vjp)


# ---------------------------------------------------------------- optimisation


@dataclass
class OptimState:
    """AdamW hyperparameters plus per-parameter moments."""

    lr: float = 1e-4
    weight_decay: float = 5e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], s: OptimState) -> None:
    """One AdamW update in place. ``None`` gradients count as zero."""
    if not s.m:
        s.m = [np.zeros_like(p.data) for p in params]
        s.v = [np.zeros_like(p.data) for p in params]
    if len(s.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    s.step += 1
    b1, b2 = s.betas
    c1 = 1.0 - b1**s.step
    c2 = 1.0 - b2**s.step
    for p, g, m, v in zip(params, grads, s.m, s.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        if s.weight_decay:
            p.data -= s.lr * s.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)


def lr_at(
    epoch: float,
    total_epochs: int,
    warmup_frac: float = 0.1,
    cycles: int = 10,
    base_lr: float = 1e-4,
) -> float:
    """Linear warmup followed by cosine decay with ``cycles`` hard restarts."""
    if not 0 <= epoch <= total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs}]")
    if cycles < 1:
        raise ContractError("cycles must be >= 1")
    warmup = warmup_frac * total_epochs
    if epoch < warmup:
        return base_lr * epoch / warmup
    if total_epochs <= warmup:
        return base_lr
    progress = (epoch - warmup) / (total_epochs - warmup)
    if progress >= 1.0:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * ((cycles * progress) % 1.0)))
