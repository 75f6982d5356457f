"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Every operation whose inputs include a
tensor with ``requires_grad=True`` records a node holding its parents and a
local gradient rule; ``backward`` walks those nodes in reverse topological
order. Nothing is recorded when no input requires gradients, so inference
paths carry no graph at all. There is no global tape: a graph is owned by
the tensors that reference it, which keeps independent workers isolated.

Broadcasting follows numpy's trailing-dimension rule; gradients are summed
back over broadcast axes.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "MemoryMeter",
    "track_memory",
    "as_tensor",
    "matmul",
    "linear",
    "concat",
    "take",
    "softmax_rows",
    "norm",
    "where",
    "cumsum",
    "clip",
    "backward",
    "finite_difference",
    "scatter_rows",
]

# ---------------------------------------------------------------------------
# Allocation accounting
# ---------------------------------------------------------------------------

_local = threading.local()


class MemoryMeter:
    """Logical byte accounting for tensors created while the meter is active.

    ``peak`` is the high-water mark of live tensor bytes, ``largest`` the
    biggest single tensor. Meters are thread-local.
    """

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0
        self.largest = 0
        self.count = 0

    def _alloc(self, nbytes: int) -> None:
        self.live += nbytes
        self.count += 1
        if self.live > self.peak:
            self.peak = self.live
        if nbytes > self.largest:
            self.largest = nbytes

    def _free(self, nbytes: int) -> None:
        self.live -= nbytes

    def record(self, array: np.ndarray) -> None:
        """Account for a non-tensor array for as long as it is alive."""
        _register(array, array.nbytes, (self,))


def _release(meters: tuple, nbytes: int) -> None:
    for m in meters:
        m._free(nbytes)


def _register(obj, nbytes: int, meters: tuple) -> None:
    for m in meters:
        m._alloc(nbytes)
    weakref.finalize(obj, _release, meters, nbytes)


@contextmanager
def track_memory():
    """Activate a ``MemoryMeter`` for the current thread."""
    stack = getattr(_local, "meters", None)
    if stack is None:
        stack = _local.meters = []
    meter = MemoryMeter()
    stack.append(meter)
    try:
        yield meter
    finally:
        stack.remove(meter)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a} and {b} do not broadcast") from None


class Tensor:
    """N-dimensional array that can take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = ""
        meters = getattr(_local, "meters", None)
        if meters:
            _register(self, arr.nbytes, tuple(meters))

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        _broadcast_shape(self.shape, other.shape, "add")
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), back, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        _broadcast_shape(self.shape, other.shape, "sub")
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), back, "sub")

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        _broadcast_shape(self.shape, other.shape, "mul")
        a, b = self, other

        def back(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data * b.data, (a, b), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        _broadcast_shape(self.shape, other.shape, "div")
        a, b = self, other
        out = a.data / b.data

        def back(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(out, (a, b), back, "div")

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        a = self
        out = a.data[index]

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(np.array(out, copy=True), (a,), back, "getitem")

    def scale(self, c: float) -> "Tensor":
        c = float(c)
        return Tensor._make(self.data * c, (self,), lambda g: (g * c,), "scale")

    def square(self) -> "Tensor":
        a = self
        return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")

    # -- elementwise nonlinearities ------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def softplus(self) -> "Tensor":
        x = self.data
        out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
        return Tensor._make(out, (self,), lambda g: (g * _sigmoid(x),), "softplus")

    # -- shape ----------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def transpose(self, *axes) -> "Tensor":
        axes = axes or None
        inv = None if axes is None else tuple(np.argsort(axes))
        out = np.transpose(self.data, axes)
        return Tensor._make(out, (self,), lambda g: (np.transpose(g, inv),), "transpose")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        out = np.asarray(self.data.sum(axis=axis, keepdims=keepdims))
        return Tensor._make(out, (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / n)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# Free functions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` as a single graph node."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {w.shape}")
    out = x.data @ w.data
    if b is None:
        parents = (x, w)
    else:
        out += b.data
        parents = (x, w, b)

    def back(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return Tensor._make(out, parents, back, "linear")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tensors, back, "concat")


def scatter_rows(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """``out[index[i]] += values[i]`` for an ``n``-row output (duplicates accumulate)."""
    index = np.asarray(index, dtype=np.intp)
    trailing = values.shape[index.ndim:]
    index = index.ravel()
    flat = values.reshape(len(index), -1)
    m = sparse.csr_matrix((np.ones(len(index), values.dtype), (index, np.arange(len(index)))),
                          shape=(n, len(index)))
    return np.asarray(m @ flat).reshape((n,) + trailing)


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.intp)
    src = x.shape

    def back(g):
        return (scatter_rows(index, g, src[0]).reshape(src),)

    return Tensor._make(x.data[index], (x,), back, "take")


def softmax_rows(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilised by subtracting the row maximum."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), back, "softmax")


def norm(x: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at zero is taken as zero."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * x.data / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return Tensor._make(out, (x,), back, "norm")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``. ``mask`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def back(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(mask, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), back, "where")


def cumsum(x: Tensor, axis: int = -1, exclusive: bool = False) -> Tensor:
    c = np.cumsum(x.data, axis=axis)
    out = c - x.data if exclusive else c

    def back(g):
        r = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (r - g if exclusive else r,)

    return Tensor._make(out, (x,), back, "cumsum")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Repeated calls add to existing gradients.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_difference(
    f: Callable[[], float],
    array: np.ndarray,
    indices: Iterable[tuple],
    eps: float = 1e-6,
) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``array``.

    ``array`` is perturbed in place and restored.
    """
    out = []
    for idx in indices:
        orig = array[idx]
        array[idx] = orig + eps
        fp = f()
        array[idx] = orig - eps
        fm = f()
        array[idx] = orig
        out.append((fp - fm) / (2 * eps))
    return np.array(out)
