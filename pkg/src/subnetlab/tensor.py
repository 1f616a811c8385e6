"""Dense tensors with eager reverse-mode autodiff, plus an Adam step.

Every differentiable computation in the package goes through :class:`Tensor`.
Data is held as float64 numpy arrays; gradients are float64 too.  A tensor
created by a primitive keeps a reference to its parents and a closure that
maps the output gradient to the parents' gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class DimensionError(ValueError):
    """Input shapes do not conform to a primitive's contract."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward from a non-scalar)."""


class NumericError(FloatingPointError):
    """Non-finite values where finite ones are required."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "kind")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.kind = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, kind={self.kind}{label})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    # -- autodiff ---------------------------------------------------------
    def backward(self, accumulate: bool = False) -> None:
        backward(self, accumulate=accumulate)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn, kind: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.kind = kind
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), fn, "matmul")


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), fn, "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scalar-mul")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (a,), fn, "softmax-lastdim")


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis (fused for stability)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(y, (a,), fn, "log-softmax-lastdim")


def gelu(a: Tensor) -> Tensor:
    """GeLU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    inner = GELU_C * x * (1.0 + GELU_A * x2)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(y, (a,), fn, "gelu")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = sigmoid_array(a.data)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,), "exp")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} exceeds hi={hi}")
    y = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _node(y, (a,), lambda g: (g * inside,), "clamp")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(y, dtype=np.float64), (a,), fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    y = a.data.mean(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _node(np.asarray(y, dtype=np.float64), (a,), fn, "mean")


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis (no affine part; compose with mul/add)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _node(y, (a,), fn, "layer-norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"embedding-lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(
            f"embedding-lookup: ids out of range for table of {table.shape[0]} rows"
        )
    y = table.data[ids]

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(y, (table,), fn, "embedding-lookup")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(y, tensors, fn, "concat")


def slice_(a: Tensor, index) -> Tensor:
    try:
        y = a.data[index]
    except IndexError as exc:
        raise DimensionError(f"slice: index {index!r} invalid for shape {a.shape}") from exc

    def fn(g):
        ga = np.zeros_like(a.data)
        if _needs_add_at(index):
            np.add.at(ga, index, g)
        else:
            ga[index] = g
        return (ga,)

    return _node(np.array(y, dtype=np.float64), (a,), fn, "slice")


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return _node(y, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    y = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(y, (a,), lambda g: (np.transpose(g, inv),), "transpose")


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": lambda xs, **k: matmul(*xs),
    "add": lambda xs, **k: add(*xs),
    "sub": lambda xs, **k: sub(*xs),
    "mul": lambda xs, **k: mul(*xs),
    "scalar-mul": lambda xs, c, **k: scalar_mul(xs[0], c),
    "softmax-lastdim": lambda xs, **k: softmax(xs[0]),
    "log-softmax-lastdim": lambda xs, **k: log_softmax(xs[0]),
    "gelu": lambda xs, **k: gelu(xs[0]),
    "sigmoid": lambda xs, **k: sigmoid(xs[0]),
    "log": lambda xs, **k: log(xs[0]),
    "exp": lambda xs, **k: exp(xs[0]),
    "clamp": lambda xs, lo, hi, **k: clamp(xs[0], lo, hi),
    "sum": lambda xs, **k: sum_(xs[0], **k),
    "mean": lambda xs, **k: mean(xs[0], **k),
    "layer-norm": lambda xs, **k: layer_norm(xs[0], **k),
    "embedding-lookup": lambda xs, ids, **k: embedding(xs[0], ids),
    "concat": lambda xs, axis=0, **k: concat(xs, axis=axis),
    "slice": lambda xs, index, **k: slice_(xs[0], index),
    "reshape": lambda xs, shape, **k: reshape(xs[0], shape),
    "transpose": lambda xs, axes=None, **k: transpose(xs[0], axes),
}

PRIMITIVE_KINDS = frozenset(_PRIMITIVES)


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("clamp", [x], lo=0, hi=1)``."""
    try:
        op = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return op([_as_tensor(x) for x in inputs], **attrs)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, accumulate: bool = False) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``output``.

    Leaf gradients are reset first unless ``accumulate`` is set, in which
    case they are added to whatever the leaves already hold.
    """
    if output.data.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
    order = _topological(output)
    if not accumulate:
        for node in order:
            if node.is_leaf and node.requires_grad:
                node.grad = np.zeros_like(node.data)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def for_param(cls, param: Tensor, lr: float = 1e-3, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), 0, beta1, beta2, eps, lr)


def adam_step(params: Sequence[Tensor], states: Sequence[AdamState],
              storage_dtype: np.dtype | None = None) -> None:
    """Apply one bias-corrected Adam update in place.

    All gradients are checked before any parameter moves, so a NaN aborts
    the whole step.  With ``storage_dtype`` set, parameters and moments are
    rounded through that dtype afterwards (keeps float32 checkpoints exact).
    """
    if len(params) != len(states):
        raise ValueError(f"adam_step: {len(params)} params but {len(states)} states")
    for i, p in enumerate(params):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {p.name or i}")
    for p, st in zip(params, states):
        if st.m.shape != p.shape:
            raise DimensionError(f"Adam state shape {st.m.shape} != param shape {p.shape}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        st.step += 1
        st.m = st.beta1 * st.m + (1.0 - st.beta1) * g
        st.v = st.beta2 * st.v + (1.0 - st.beta2) * g * g
        m_hat = st.m / (1.0 - st.beta1**st.step)
        v_hat = st.v / (1.0 - st.beta2**st.step)
        p.data = p.data - st.lr * m_hat / (np.sqrt(v_hat) + st.eps)
        if storage_dtype is not None:
            p.data = p.data.astype(storage_dtype).astype(np.float64)
            st.m = st.m.astype(storage_dtype).astype(np.float64)
            st.v = st.v.astype(storage_dtype).astype(np.float64)
