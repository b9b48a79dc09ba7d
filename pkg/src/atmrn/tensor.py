"""Dense tensors with tape-based reverse-mode differentiation."""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the float width used for new tensors and parameters.

    ``with precision(np.float64): ...`` is the gradient-check mode.
    """
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


class AutodiffError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """An n-d float array that records the ops producing it.

    Values are treated as immutable once created; gradients are stored on
    ``.grad`` after :meth:`backward`.  Leaf gradients accumulate across
    backward calls until :meth:`zero_grad`.
    """

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction helpers ------------------------------------------------
    @classmethod
    def _op(cls, data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls(data, dtype=data.dtype if isinstance(data, np.ndarray) else None)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
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

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------
    def _topo(self) -> list:
        order, seen = [], set()
        stack = [(self, False)]
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

    def backward(self):
        if self.data.size != 1:
            raise AutodiffError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise AutodiffError("loss does not depend on any tensor requiring grad")
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                node.grad = g
                pgs = node._backward(g)
                for p, pg in zip(node._parents, pgs):
                    if pg is None or not p.requires_grad:
                        continue
                    pg = np.asarray(pg, dtype=p.data.dtype)
                    if pg.shape != p.shape:
                        raise AutodiffError(f"gradient shape {pg.shape} != tensor shape {p.shape}")
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
            else:
                node.grad = g.copy() if node.grad is None else node.grad + g

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        return Tensor._op(self.data + other.data, (self, other),
                          lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        return Tensor._op(self.data - other.data, (self, other),
                          lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        return Tensor._op(x * y, (self, other),
                          lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        return Tensor._op(x / y, (self, other),
                          lambda g: (_unbroadcast(g / y, x.shape),
                                     _unbroadcast(-g * x / (y * y), y.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __matmul__(self, other):
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        if x.ndim != 2 or y.ndim != 2:
            raise AutodiffError("matmul supports 2-d operands only")
        if x.shape[1] != y.shape[0]:
            raise AutodiffError(f"matmul inner dimension mismatch: {x.shape} @ {y.shape}")
        return Tensor._op(x @ y, (self, other), lambda g: (g @ y.T, x.T @ g))

    def __pow__(self, p: float):
        x = self.data
        return Tensor._op(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def square(self):
        x = self.data
        return Tensor._op(x * x, (self,), lambda g: (2.0 * g * x,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._op(y, (self,), lambda g: (g * 0.5 / y,))

    def abs(self):
        x = self.data
        return Tensor._op(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def exp(self):
        y = np.exp(self.data)
        return Tensor._op(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._op(np.log(x), (self,), lambda g: (g / x,))

    # -- reductions / shape --------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._op(np.asarray(out, dtype=self.dtype), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, key):
        shape = self.shape
        dtype = self.dtype
        out = self.data[key]
        if isinstance(key, np.ndarray) and np.issubdtype(key.dtype, np.integer):
            flat = key.reshape(-1)

            def bw(g):
                return (_kernels.scatter_add_rows(shape[0], flat, g.reshape((len(flat),) + shape[1:])),)
        else:
            def bw(g):
                full = np.zeros(shape, dtype=dtype)
                np.add.at(full, key, g)
                return (full,)

        return Tensor._op(np.array(out, copy=True), (self,), bw)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _DEFAULT_DTYPE))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._op(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def cross(a: Tensor, b: Tensor) -> Tensor:
    """Cross product over the last axis (size 3)."""
    x, y = a.data, b.data

    def bw(g):
        return np.cross(y, g), np.cross(g, x)

    return Tensor._op(np.cross(x, y), (a, b), bw)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)
