"""Reverse-mode automatic differentiation over dense float64 tensors.

A `Tensor` wraps a contiguous row-major numpy array of 64-bit floats. Ops
build a dynamic graph: each op output stores references to its parents and
a vector-Jacobian closure; the graph is rebuilt on every forward pass and
released by ordinary garbage collection once the outputs go out of scope
(parent references only point backward, so there are no cycles).

Semantics worth knowing:

* Broadcasting follows the standard trailing-dimension rule. There is a
  single numeric type (float64); no promotion happens anywhere.
* ``backward()`` may be called repeatedly on the same root. Each call first
  resets the gradients of every tensor reachable from the root and then
  accumulates, so repeated calls produce identical leaf gradients. Within
  one graph, a tensor used by several ops receives the sum of all paths.
* Only leaves keep their ``grad`` after ``backward()``; interior gradients
  are dropped as soon as they have been consumed.
* ``max``-reduction routes its gradient to the first maximal element along
  the reduced axis (ties broken by position).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "tensor",
    "matmul",
    "concatenate",
    "softmax",
    "gather",
    "cumsum",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "tanh",
    "relu",
    "reshape",
    "transpose",
    "broadcast_to",
    "straight_through_sample",
    "straight_through_mode",
    "Adam",
]


def _as_array(value) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 array participating in a reverse-mode gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- introspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def detach(self) -> "Tensor":
        """Leaf sharing this buffer with gradient flow cut."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._parents = ()
        out._vjp = None
        return out

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return _binary("add", self, other, lambda a, b: a + b, _add_vjp)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other, lambda a, b: a - b, _sub_vjp)

    def __rsub__(self, other):
        return _binary("sub", _coerce(other), self, lambda a, b: a - b, _sub_vjp)

    def __mul__(self, other):
        return _binary("mul", self, other, lambda a, b: a * b, _mul_vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary("div", self, other, lambda a, b: a / b, _div_vjp)

    def __rtruediv__(self, other):
        return _binary("div", _coerce(other), self, lambda a, b: a / b, _div_vjp)

    def __neg__(self):
        out_data = -self.data
        return Tensor._from_op(out_data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        p = float(exponent)
        x = self.data
        out_data = x**p
        return Tensor._from_op(out_data, (self,), lambda g: (g * p * x ** (p - 1.0),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        out_data = self.data[key]
        shape = self.data.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, key, g)
            return (full,)

        out = Tensor._from_op(np.ascontiguousarray(out_data), (self,), vjp)
        return out

    # -- reductions (method sugar) ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- backward ----------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf with ``requires_grad``.

        The root must be a scalar (one element) produced by a recorded
        graph. Gradients of all reachable tensors are reset first, so a
        second call without re-running the forward pass yields the same
        leaf gradients as the first.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() root must be scalar, got shape {self.shape}")
        if not self._parents:
            raise RuntimeError("backward() on a tensor with no recorded graph")

        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.grad is None or node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
            if node._parents:
                node.grad = None  # interior gradients are not retained


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the requires-grad subgraph."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


# -- broadcasting helpers ----------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _add_vjp(a, b):
    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return vjp


def _sub_vjp(a, b):
    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return vjp


def _mul_vjp(a, b):
    def vjp(g):
        return (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))

    return vjp


def _div_vjp(a, b):
    def vjp(g):
        return (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape))

    return vjp


def _binary(op, left, right, fwd, make_vjp):
    lt, rt = _coerce(left), _coerce(right)
    _check_broadcast(op, lt.data, rt.data)
    out_data = fwd(lt.data, rt.data)
    return Tensor._from_op(out_data, (lt, rt), make_vjp(lt.data, rt.data))


# -- core ops ------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; operands must be at least 2-D, batch dims broadcast."""
    at, bt = _coerce(a), _coerce(b)
    if at.data.ndim < 2 or bt.data.ndim < 2:
        raise ValueError(f"matmul: operands must be >= 2-D, got {at.shape} and {bt.shape}")
    if at.shape[-1] != bt.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {at.shape} vs {bt.shape}")
    ad, bd = at.data, bt.data
    out_data = ad @ bd

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return (ga, gb)

    return Tensor._from_op(out_data, (at, bt), vjp)


def _unary(t, out_data, dfunc) -> Tensor:
    return Tensor._from_op(out_data, (t,), lambda g: (g * dfunc(),))


def exp(t) -> Tensor:
    t = _coerce(t)
    out = np.exp(t.data)
    return _unary(t, out, lambda: out)


def log(t) -> Tensor:
    t = _coerce(t)
    return _unary(t, np.log(t.data), lambda: 1.0 / t.data)


def softplus(t) -> Tensor:
    """ln(1 + e^x), computed stably for large |x|."""
    t = _coerce(t)
    x = t.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _unary(t, out, lambda: expit(x))


def sigmoid(t) -> Tensor:
    t = _coerce(t)
    s = expit(t.data)
    return _unary(t, s, lambda: s * (1.0 - s))


def tanh(t) -> Tensor:
    t = _coerce(t)
    y = np.tanh(t.data)
    return _unary(t, y, lambda: 1.0 - y * y)


def relu(t) -> Tensor:
    t = _coerce(t)
    x = t.data
    return _unary(t, np.maximum(x, 0.0), lambda: (x > 0.0).astype(np.float64))


def reduce_sum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _coerce(t)
    out_data = t.data.sum(axis=axis, keepdims=keepdims)
    shape = t.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out_data), (t,), vjp)


def reduce_mean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _coerce(t)
    if axis is None:
        count = t.data.size
    elif isinstance(axis, tuple):
        count = math.prod(t.data.shape[a] for a in axis)
    else:
        count = t.data.shape[axis]
    return reduce_sum(t, axis=axis, keepdims=keepdims) * (1.0 / count)


def reduce_max(t, axis=None, keepdims: bool = False) -> Tensor:
    """Max-reduce; gradient routes to the first maximal entry."""
    t = _coerce(t)
    x = t.data
    out_data = x.max(axis=axis, keepdims=keepdims)

    if axis is None:
        flat_idx = int(np.argmax(x))

        def vjp(g):
            full = np.zeros_like(x)
            full.reshape(-1)[flat_idx] = np.asarray(g).reshape(-1)[0]
            return (full,)

    else:
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(x)
            np.put_along_axis(full, idx, g, axis=axis)
            return (full,)

    return Tensor._from_op(np.asarray(out_data), (t,), vjp)


def concatenate(tensors, axis: int = 0) -> Tensor:
    parts = tuple(_coerce(t) for t in tensors)
    if not parts:
        raise ValueError("concatenate: need at least one tensor")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return Tensor._from_op(out_data, parts, vjp)


def softmax(t, axis: int = -1) -> Tensor:
    t = _coerce(t)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return Tensor._from_op(s, (t,), vjp)


def gather(t, indices, axis: int = -1) -> Tensor:
    """Select entries along ``axis`` per ``np.take_along_axis`` semantics."""
    t = _coerce(t)
    idx = np.asarray(indices)
    out_data = np.take_along_axis(t.data, idx, axis=axis)
    shape = t.data.shape

    def vjp(g):
        full = np.zeros(shape)
        grid = list(np.indices(idx.shape, sparse=False))
        grid[axis] = idx
        np.add.at(full, tuple(grid), g)
        return (full,)

    return Tensor._from_op(out_data, (t,), vjp)


def cumsum(t, axis: int = -1) -> Tensor:
    t = _coerce(t)
    out_data = np.cumsum(t.data, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return Tensor._from_op(out_data, (t,), vjp)


def reshape(t, shape) -> Tensor:
    t = _coerce(t)
    orig = t.data.shape
    out_data = t.data.reshape(shape)
    return Tensor._from_op(out_data, (t,), lambda g: (g.reshape(orig),))


def transpose(t, axes=None) -> Tensor:
    t = _coerce(t)
    out_data = np.transpose(t.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return Tensor._from_op(np.ascontiguousarray(out_data), (t,), vjp)


def broadcast_to(t, shape) -> Tensor:
    t = _coerce(t)
    orig = t.data.shape
    out_data = np.broadcast_to(t.data, shape).copy()
    return Tensor._from_op(out_data, (t,), lambda g: (_unbroadcast(g, orig),))


# -- categorical sampling -----------------------------------------------------------


def _categorical_indices(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sample per row of the trailing axis."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    idx = (cdf < u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _one_hot_like(probs: np.ndarray, idx: np.ndarray) -> np.ndarray:
    hard = np.zeros_like(probs)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return hard


def _straight_through(logits, idx) -> Tensor:
    p = softmax(logits, axis=-1)
    hard = _one_hot_like(p.data, idx)
    return p + Tensor(hard - p.data)


def straight_through_sample(logits, rng: np.random.Generator) -> Tensor:
    """One-hot categorical sample with a softmax straight-through gradient.

    ``logits`` has shape (..., num_categoricals, num_classes); one class is
    drawn per trailing row. The forward value is the hard one-hot sample;
    the backward pass treats the output as if it were softmax(logits).
    """
    lt = _coerce(logits)
    if lt.data.ndim < 2:
        raise ValueError(f"straight_through_sample: logits must be >= 2-D, got {lt.shape}")
    probs = _stable_softmax(lt.data)
    idx = _categorical_indices(probs, rng)
    return _straight_through(lt, idx)


def straight_through_mode(logits) -> Tensor:
    """Deterministic variant: hard one-hot at the argmax class per row."""
    lt = _coerce(logits)
    if lt.data.ndim < 2:
        raise ValueError(f"straight_through_mode: logits must be >= 2-D, got {lt.shape}")
    idx = np.argmax(lt.data, axis=-1)
    return _straight_through(lt, idx)


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- optimizer ------------------------------------------------------------------------


class Adam:
    """Adam with per-parameter moment buffers that persist across steps."""

    def __init__(self, params, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if isinstance(params, dict):
            self._items = list(params.items())
        else:
            self._items = [(p.name or f"param[{i}]", p) for i, p in enumerate(params)]
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self._m = [np.zeros_like(p.data) for _, p in self._items]
        self._v = [np.zeros_like(p.data) for _, p in self._items]
        self._t = 0

    def step(self) -> None:
        missing = [name for name, p in self._items if p.grad is None]
        if missing:
            raise ValueError(f"Adam.step: no gradient on parameter(s) {missing}")
        self._t += 1
        bc1 = 1.0 - self.beta1**self._t
        bc2 = 1.0 - self.beta2**self._t
        for (name, p), m, v in zip(self._items, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self._items:
            p.grad = None
