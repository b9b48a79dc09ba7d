"""Neural-network primitives on :class:`~atmrn.tensor.Tensor`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .tensor import Tensor, as_tensor


class ShapeError(ValueError):
    """Operand shapes disagree; ``dim`` names the offending dimension."""

    def __init__(self, op: str, dim: str, expected, got):
        self.op, self.dim, self.expected, self.got = op, dim, expected, got
        super().__init__(f"{op}: dimension '{dim}' expected {expected}, got {got}")


# ---------------------------------------------------------------------------
# Sparse matrices
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SparseMatrix:
    """Fixed (non-trainable) sparse matrix in canonical row-major COO form."""

    rows: int
    cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        self.row_idx = np.asarray(self.row_idx, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.row_idx):
            if self.row_idx.min() < 0 or self.row_idx.max() >= self.rows:
                raise ValueError("row index out of range")
            if self.col_idx.min() < 0 or self.col_idx.max() >= self.cols:
                raise ValueError("column index out of range")
            key = self.row_idx * self.cols + self.col_idx
            if np.any(np.diff(key) <= 0):
                raise ValueError("entries must be sorted row-major without duplicates")

    @classmethod
    def from_triplets(cls, rows: int, cols: int, r, c, v) -> "SparseMatrix":
        """Canonicalise triplets: sort row-major and sum duplicates."""
        m = sp.coo_matrix((np.asarray(v, float), (np.asarray(r), np.asarray(c))), shape=(rows, cols)).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        coo = m.tocoo()
        return cls(rows, cols, coo.row, coo.col, coo.data)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        i = np.arange(n)
        return cls(n, n, i, i, np.ones(n))

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix((self.values, (self.row_idx, self.col_idx)), shape=self.shape)
        return self._csr

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_idx, self.col_idx] = self.values
        return out

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_triplets(self.cols, self.rows, self.col_idx, self.row_idx, self.values)

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_idx, weights=self.values, minlength=self.rows)

    def __matmul__(self, other):
        if isinstance(other, SparseMatrix):
            m = (self.csr() @ other.csr()).tocoo()
            return SparseMatrix.from_triplets(self.rows, other.cols, m.row, m.col, m.data)
        return self.csr() @ np.asarray(other)


def sparse_matmul(m: SparseMatrix, x: Tensor) -> Tensor:
    """``m @ x`` for a fixed sparse ``m`` and a dense (V, F) tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("sparse_matmul", "x.ndim", 2, x.ndim)
    if x.shape[0] != m.cols:
        raise ShapeError("sparse_matmul", "rows of x", m.cols, x.shape[0])
    a = m.csr()
    dtype = x.dtype
    out = np.asarray(a @ x.data, dtype=dtype)
    return Tensor._op(out, (x,), lambda g: (np.asarray(a.T @ g, dtype=dtype),))


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", "in_features", weight.shape[1], x.shape[-1])
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd.T).reshape(lead + (wd.shape[0],))
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise ShapeError("linear", "bias", (wd.shape[0],), bias.shape)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if bias is not None:
            return gx, gw, g2.sum(axis=0)
        return gx, gw

    return Tensor._op(out, parents, bw)


def graph_conv(x: Tensor, adj: SparseMatrix, weight: Tensor, bias: Tensor) -> Tensor:
    """One-hop graph convolution ``adj @ x @ weight.T + bias``."""
    return linear(sparse_matmul(adj, x), weight, bias)


def log_softmax(x: Tensor, axis: int = 0) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._op(out, (x,), bw)


# ---------------------------------------------------------------------------
# 3-D convolutions
# ---------------------------------------------------------------------------

def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, k: int, s: int) -> tuple[np.ndarray, tuple]:
    """(N, C, D, H, W) padded input -> (N*D'*H'*W', C*k^3) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
    od, oh, ow = win.shape[2:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * od * oh * ow, c * k ** 3)
    return cols, (od, oh, ow)


def _col2im(cols: np.ndarray, padded_shape: tuple, k: int, s: int, out_sp: tuple) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into the padded grid."""
    return _kernels.col2im(cols, padded_shape, k, s, out_sp)


def _check_conv(op, x, w, b, stride, in_axis):
    if x.ndim != 5:
        raise ShapeError(op, "input.ndim", 5, x.ndim)
    if w.ndim != 5:
        raise ShapeError(op, "weight.ndim", 5, w.ndim)
    k = w.shape[2]
    if w.shape[3] != k or w.shape[4] != k:
        raise ShapeError(op, "kernel (cubic)", (k, k, k), w.shape[2:])
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(op, "channels", w.shape[in_axis], x.shape[1])
    out_c = w.shape[1 - in_axis]
    if b is not None and b.shape != (out_c,):
        raise ShapeError(op, "bias", (out_c,), b.shape)
    if stride not in (1, 2):
        raise ShapeError(op, "stride", "1 or 2", stride)
    return k


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation on (N, C, D, H, W) with weight (C', C, k, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    k = _check_conv("conv3d", x, weight, bias, stride, in_axis=1)
    if k % 2 != 1:
        raise ShapeError("conv3d", "kernel", "odd", k)
    n, c = x.shape[:2]
    for name, size in zip("DHW", x.shape[2:]):
        if size + 2 * padding < k:
            raise ShapeError("conv3d", name, f">= {k - 2 * padding}", size)
    co = weight.shape[0]
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    cols, osp = _im2col(xp, k, stride)
    wm = weight.data.reshape(co, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = out.reshape((n,) + osp + (co,)).transpose(0, 4, 1, 2, 3)
    parents = [x, weight] + ([bias] if bias is not None else [])
    xshape, pshape = x.shape, xp.shape

    def bw(g):
        gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, co)
        gw = (gm.T @ cols).reshape(weight.shape)
        gx = _col2im(gm @ wm, pshape, k, stride, osp)
        if p:
            gx = gx[:, :, p:p + xshape[2], p:p + xshape[3], p:p + xshape[4]]
        res = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            res.append(gm.sum(axis=0))
        return res

    return Tensor._op(np.ascontiguousarray(out), parents, bw)


def conv3d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0,
                     output_padding: int | None = None) -> Tensor:
    """Transposed 3-D convolution; the adjoint of :func:`conv3d` with the same weight.

    ``weight`` is (C', C, k, k, k) and maps C' input channels to C outputs.
    ``output_padding`` defaults to ``stride - 1`` so that k=3, padding=1,
    stride=2 exactly doubles each extent.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    k = _check_conv("conv3d_transpose", x, weight, bias, stride, in_axis=0)
    op = stride - 1 if output_padding is None else output_padding
    n, ci = x.shape[:2]
    co = weight.shape[1]
    p = padding
    osp_in = x.shape[2:]
    buf = tuple((d - 1) * stride + k + op for d in osp_in)
    out_sp = tuple(b - 2 * p for b in buf)
    if min(out_sp) < 1:
        raise ShapeError("conv3d_transpose", "output extent", ">= 1", out_sp)
    xm = x.data.transpose(0, 2, 3, 4, 1).reshape(-1, ci)
    wm = weight.data.reshape(ci, -1)
    full = _col2im(xm @ wm, (n, co) + buf, k, stride, osp_in)
    out = full[:, :, p:p + out_sp[0], p:p + out_sp[1], p:p + out_sp[2]]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    parents = [x, weight] + ([bias] if bias is not None else [])

    def bw(g):
        gp = np.zeros((n, co) + buf, dtype=g.dtype)
        gp[:, :, p:p + out_sp[0], p:p + out_sp[1], p:p + out_sp[2]] = g
        cols, osp = _im2col(gp, k, stride)
        cols = cols.reshape(n, *osp, -1)[:, :osp_in[0], :osp_in[1], :osp_in[2]].reshape(xm.shape[0], -1)
        gx = (cols @ wm.T).reshape(n, *osp_in, ci).transpose(0, 4, 1, 2, 3)
        gw = (xm.T @ cols).reshape(weight.shape)
        res = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3, 4)))
        return res

    return Tensor._op(np.ascontiguousarray(out), parents, bw)


# ---------------------------------------------------------------------------
# Batch normalisation
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats | None,
              training: bool = True, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation; channels on axis 1 ([N, C, ...] or [V, C])."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm", "channels", c, gamma.shape)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if state is not None:
            m = xd.size // c
            unbiased = var * (m / max(m - 1, 1))
            state.mean[...] = (1 - state.momentum) * state.mean + state.momentum * mean
            state.var[...] = (1 - state.momentum) * state.var + state.momentum * unbiased
    else:
        mean, var = state.mean.astype(xd.dtype), state.var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    m = xd.size // c

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape) - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return Tensor._op(out.astype(xd.dtype), (x, gamma, beta), bw)
