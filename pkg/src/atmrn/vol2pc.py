"""Differentiable trilinear sampling of feature volumes at mesh vertices."""
from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import Tensor, as_tensor, concat

# corner offsets (dz, dy, dx) in the order used for weights
_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def trilinear_sample(feature: Tensor, points: Tensor) -> Tensor:
    """Sample a [C, D, H, W] feature volume at [V, 3] normalised points -> [V, C].

    Coordinate k of a point indexes spatial axis k; -1 and +1 are the centres
    of the first and last voxel; a size-1 axis is constant.  Points outside the cube are clamped to the
    border, where the gradient with respect to the point is zero.
    """
    feature, points = as_tensor(feature), as_tensor(points)
    if feature.ndim != 4:
        raise ValueError(f"feature must be [C, D, H, W], got {feature.shape}")
    c = feature.shape[0]
    dims = np.array(feature.shape[1:])
    if np.any(dims < 1):
        raise ValueError("feature volume has an empty axis")
    dtype = feature.dtype
    p = points.data.astype(np.float64)
    scale = (dims - 1) / 2.0
    u_raw = (p + 1.0) * scale
    u = np.clip(u_raw, 0.0, dims - 1)
    inside = (u_raw >= 0.0) & (u_raw <= dims - 1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, np.maximum(dims - 2, 0))
    t = u - i0
    fm = np.ascontiguousarray(feature.data.reshape(c, -1).T)  # (DHW, C)
    strides = np.array([dims[1] * dims[2], dims[2], 1])

    lin = np.empty((len(p), 8), dtype=np.int64)
    w = np.empty((len(p), 8))
    dw = np.empty((len(p), 8, 3))
    for j, (a, b, e) in enumerate(_CORNERS):
        off = np.array([a, b, e])
        lin[:, j] = np.minimum(i0 + off, dims - 1) @ strides  # size-1 axes: weight of off=1 is 0
        f = np.where(off == 1, t, 1.0 - t)       # per-axis factor
        df = np.where(off == 1, 1.0, -1.0)       # d factor / d t
        w[:, j] = f[:, 0] * f[:, 1] * f[:, 2]
        dw[:, j, 0] = df[0] * f[:, 1] * f[:, 2]
        dw[:, j, 1] = f[:, 0] * df[1] * f[:, 2]
        dw[:, j, 2] = f[:, 0] * f[:, 1] * df[2]
    out = _kernels.trilinear_gather(fm, lin, w)
    fshape = feature.shape

    def bw(g):
        gfm, gt = _kernels.trilinear_grads(fm, lin, w, dw, g)
        gfeat = np.ascontiguousarray(gfm.T).reshape(fshape)
        gp = gt * scale * inside
        return gfeat, gp.astype(points.dtype)

    return Tensor._op(out.astype(dtype), (feature, points), bw)


def map_pyramid(features: list, points: Tensor) -> Tensor:
    """Sample every map of a feature pyramid at ``points`` and concatenate X0 -> Xn.

    ``features`` holds [1, C, D, H, W] (or [C, D, H, W]) tensors.
    """
    cols = []
    for x in features:
        x = as_tensor(x)
        if x.ndim == 5:
            x = x.reshape(x.shape[1:])
        cols.append(trilinear_sample(x, points))
    return concat(cols, axis=1)
