"""Hot numeric kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The numba path is used when numba imports cleanly and ``ATMRN_NUMBA`` is not
set to ``0``.  Both paths return the same values (up to float summation order
for the scatter kernel in float32).
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - depends on environment
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("ATMRN_NUMBA", "1") != "0"


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# scatter-add of rows: out[idx[i]] += vals[i]
# ---------------------------------------------------------------------------

def scatter_add_rows_numpy(n_rows: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    vals2 = vals.reshape(len(idx), -1)
    out = np.empty((n_rows, vals2.shape[1]), dtype=vals.dtype)
    for c in range(vals2.shape[1]):
        out[:, c] = np.bincount(idx, weights=vals2[:, c], minlength=n_rows)
    return out.reshape((n_rows,) + vals.shape[1:])


if HAVE_NUMBA:

    @njit(cache=True)
    def _scatter_add_rows_nb(out, idx, vals):
        n, c = vals.shape
        for i in range(n):
            r = idx[i]
            for j in range(c):
                out[r, j] += vals[i, j]
        return out


def scatter_add_rows_numba(n_rows: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    vals2 = np.ascontiguousarray(vals.reshape(len(idx), -1))
    out = np.zeros((n_rows, vals2.shape[1]), dtype=vals.dtype)
    _scatter_add_rows_nb(out, np.ascontiguousarray(idx, dtype=np.int64), vals2)
    return out.reshape((n_rows,) + vals.shape[1:])


def scatter_add_rows(n_rows: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Sum the rows of ``vals`` into an ``n_rows`` array at positions ``idx``."""
    idx = np.asarray(idx).reshape(-1)
    if USE_NUMBA:
        return scatter_add_rows_numba(n_rows, idx, vals)
    return scatter_add_rows_numpy(n_rows, idx, vals)


# ---------------------------------------------------------------------------
# closest point on a triangle soup
# ---------------------------------------------------------------------------

def closest_on_triangles_vec(p, a, b, c):
    """Closest point of ``p`` on triangles ``(a, b, c)``, broadcasting.

    Returns barycentric weights (..., 3) and squared distances (...).
    Region tests follow the Voronoi-region walk of Ericson's
    *Real-Time Collision Detection* (5.1.5).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.sum(ab * ap, axis=-1)
    d2 = np.sum(ac * ap, axis=-1)
    bp = p - b
    d3 = np.sum(ab * bp, axis=-1)
    d4 = np.sum(ac * bp, axis=-1)
    cp = p - c
    d5 = np.sum(ab * cp, axis=-1)
    d6 = np.sum(ac * cp, axis=-1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    shape = np.broadcast(d1, d6).shape
    u = np.zeros(shape)
    v = np.zeros(shape)
    w = np.zeros(shape)
    done = np.zeros(shape, dtype=bool)

    def take(mask, uu, vv, ww):
        m = mask & ~done
        u[m] = uu[m] if np.ndim(uu) else uu
        v[m] = vv[m] if np.ndim(vv) else vv
        w[m] = ww[m] if np.ndim(ww) else ww
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        take((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        t = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t, t, 0.0)
        take((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        t = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t, 0.0, t)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1.0 - t, t)
        denom = va + vb + vc
        ok = denom != 0
        vv = np.where(ok, vb / np.where(ok, denom, 1.0), 0.0)
        ww = np.where(ok, vc / np.where(ok, denom, 1.0), 0.0)
        take(np.ones(shape, dtype=bool), 1.0 - vv - ww, vv, ww)
    bary = np.stack([u, v, w], axis=-1)
    q = bary[..., 0:1] * a + bary[..., 1:2] * b + bary[..., 2:3] * c
    d = p - q
    return bary, np.sum(d * d, axis=-1)


def closest_point_triangles_numpy(points, tri_a, tri_b, tri_c, chunk=4_000_000):
    n, f = len(points), len(tri_a)
    best_d = np.empty(n)
    best_f = np.empty(n, dtype=np.int64)
    best_b = np.empty((n, 3))
    step = max(1, chunk // max(f, 1))
    for s in range(0, n, step):
        p = points[s:s + step, None, :]
        bary, d2 = closest_on_triangles_vec(p, tri_a[None], tri_b[None], tri_c[None])
        j = np.argmin(d2, axis=1)
        rows = np.arange(len(j))
        best_d[s:s + step] = d2[rows, j]
        best_f[s:s + step] = j
        best_b[s:s + step] = bary[rows, j]
    return best_d, best_f, best_b


if HAVE_NUMBA:

    @njit(cache=True)
    def _closest_one(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
        abx, aby, abz = bx - ax, by - ay, bz - az
        acx, acy, acz = cx - ax, cy - ay, cz - az
        apx, apy, apz = px - ax, py - ay, pz - az
        d1 = abx * apx + aby * apy + abz * apz
        d2 = acx * apx + acy * apy + acz * apz
        bpx, bpy, bpz = px - bx, py - by, pz - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        cpx, cpy, cpz = px - cx, py - cy, pz - cz
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d1 <= 0.0 and d2 <= 0.0:
            u, v, w = 1.0, 0.0, 0.0
        elif d3 >= 0.0 and d4 <= d3:
            u, v, w = 0.0, 1.0, 0.0
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            t = d1 / (d1 - d3)
            u, v, w = 1.0 - t, t, 0.0
        elif d6 >= 0.0 and d5 <= d6:
            u, v, w = 0.0, 0.0, 1.0
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            t = d2 / (d2 - d6)
            u, v, w = 1.0 - t, 0.0, t
        elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            u, v, w = 0.0, 1.0 - t, t
        else:
            denom = va + vb + vc
            if denom != 0.0:
                v = vb / denom
                w = vc / denom
            else:
                v, w = 0.0, 0.0
            u = 1.0 - v - w
        qx = u * ax + v * bx + w * cx
        qy = u * ay + v * by + w * cy
        qz = u * az + v * bz + w * cz
        dx, dy, dz = px - qx, py - qy, pz - qz
        return dx * dx + dy * dy + dz * dz, u, v, w

    @njit(cache=True)
    def _closest_point_triangles_nb(points, A, B, C, centers, radii, seeds,
                                    best_d, best_f, best_b):
        n = points.shape[0]
        nf = A.shape[0]
        for i in range(n):
            px, py, pz = points[i, 0], points[i, 1], points[i, 2]
            bd = np.inf
            bf = -1
            bu, bv, bw = 0.0, 0.0, 0.0
            for s in range(seeds.shape[1]):
                f = seeds[i, s]
                d, u, v, w = _closest_one(px, py, pz, A[f, 0], A[f, 1], A[f, 2],
                                          B[f, 0], B[f, 1], B[f, 2],
                                          C[f, 0], C[f, 1], C[f, 2])
                if d < bd or (d == bd and f < bf):
                    bd, bf, bu, bv, bw = d, f, u, v, w
            for f in range(nf):
                ex = px - centers[f, 0]
                ey = py - centers[f, 1]
                ez = pz - centers[f, 2]
                lb = np.sqrt(ex * ex + ey * ey + ez * ez) - radii[f]
                if lb > 0.0 and lb * lb > bd:
                    continue
                d, u, v, w = _closest_one(px, py, pz, A[f, 0], A[f, 1], A[f, 2],
                                          B[f, 0], B[f, 1], B[f, 2],
                                          C[f, 0], C[f, 1], C[f, 2])
                if d < bd or (d == bd and f < bf):
                    bd, bf, bu, bv, bw = d, f, u, v, w
            best_d[i] = bd
            best_f[i] = bf
            best_b[i, 0] = bu
            best_b[i, 1] = bv
            best_b[i, 2] = bw


def closest_point_triangles_numba(points, tri_a, tri_b, tri_c, n_seeds=4):
    from scipy.spatial import cKDTree

    points = np.ascontiguousarray(points, dtype=np.float64)
    A = np.ascontiguousarray(tri_a, dtype=np.float64)
    B = np.ascontiguousarray(tri_b, dtype=np.float64)
    C = np.ascontiguousarray(tri_c, dtype=np.float64)
    centers = (A + B + C) / 3.0
    radii = np.sqrt(np.max(np.stack([np.sum((X - centers) ** 2, axis=1) for X in (A, B, C)]), axis=0))
    k = min(n_seeds, len(A))
    _, seeds = cKDTree(centers).query(points, k=k)
    seeds = np.ascontiguousarray(np.asarray(seeds, dtype=np.int64).reshape(len(points), k))
    n = len(points)
    best_d = np.empty(n)
    best_f = np.empty(n, dtype=np.int64)
    best_b = np.empty((n, 3))
    _closest_point_triangles_nb(points, A, B, C, centers, radii, seeds, best_d, best_f, best_b)
    return best_d, best_f, best_b


def closest_point_triangles(points, tri_a, tri_b, tri_c):
    """Squared distance, face index and barycentrics of the closest surface point.

    ``tri_a``, ``tri_b``, ``tri_c`` are (F, 3) corner arrays.  Ties resolve to
    the lowest face index.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return np.empty(0), np.empty(0, dtype=np.int64), np.empty((0, 3))
    if USE_NUMBA:
        return closest_point_triangles_numba(points, tri_a, tri_b, tri_c)
    return closest_point_triangles_numpy(points, np.asarray(tri_a, float),
                                         np.asarray(tri_b, float), np.asarray(tri_c, float))


# ---------------------------------------------------------------------------
# col2im: scatter-add conv patches back onto the padded grid
# ---------------------------------------------------------------------------

def col2im_numpy(cols, padded_shape, k, s, out_sp):
    n, c = padded_shape[:2]
    od, oh, ow = out_sp
    out = np.zeros(padded_shape, dtype=cols.dtype)
    patches = cols.reshape(n, od, oh, ow, c, k, k, k).transpose(0, 4, 5, 6, 7, 1, 2, 3)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                out[:, :, a:a + s * od:s, b:b + s * oh:s, e:e + s * ow:s] += patches[:, :, a, b, e]
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _col2im_nb(cols, out, k, s, od, oh, ow):
        n, c = out.shape[0], out.shape[1]
        k3 = k * k * k
        row = 0
        for b in range(n):
            for z in range(od):
                for y in range(oh):
                    for x in range(ow):
                        for ch in range(c):
                            base = ch * k3
                            j = 0
                            for dz in range(k):
                                for dy in range(k):
                                    for dx in range(k):
                                        out[b, ch, z * s + dz, y * s + dy, x * s + dx] += cols[row, base + j]
                                        j += 1
                        row += 1
        return out


def col2im_numba(cols, padded_shape, k, s, out_sp):
    out = np.zeros(padded_shape, dtype=cols.dtype)
    _col2im_nb(np.ascontiguousarray(cols), out, k, s, out_sp[0], out_sp[1], out_sp[2])
    return out


def col2im(cols, padded_shape, k, s, out_sp):
    """Adjoint of im2col for cubic kernels: (N*D'*H'*W', C*k^3) -> padded grid."""
    if USE_NUMBA:
        return col2im_numba(cols, tuple(padded_shape), int(k), int(s), tuple(out_sp))
    return col2im_numpy(cols, padded_shape, k, s, out_sp)


# ---------------------------------------------------------------------------
# trilinear gather / scatter over 8 cell corners
# ---------------------------------------------------------------------------

def trilinear_gather_numpy(fm, lin, w):
    """out[v] = sum_j w[v, j] * fm[lin[v, j]]; fm is (M, C)."""
    return np.einsum("vj,vjc->vc", w, fm[lin])


def trilinear_grads_numpy(fm, lin, w, dw, g):
    """Gradients wrt the flattened feature rows and the 3 cell coordinates."""
    contrib = (w[:, :, None] * g[:, None, :]).reshape(-1, fm.shape[1])
    gfm = scatter_add_rows_numpy(fm.shape[0], lin.reshape(-1), contrib)
    gt = np.einsum("vjk,vjc,vc->vk", dw, fm[lin], g)
    return gfm, gt


if HAVE_NUMBA:

    @njit(cache=True)
    def _tri_gather_nb(fm, lin, w, out):
        nv, c = out.shape
        for v in range(nv):
            for j in range(8):
                r = lin[v, j]
                wj = w[v, j]
                for ch in range(c):
                    out[v, ch] += wj * fm[r, ch]
        return out

    @njit(cache=True)
    def _tri_grads_nb(fm, lin, w, dw, g, gfm, gt):
        nv, c = g.shape
        for v in range(nv):
            for j in range(8):
                r = lin[v, j]
                wj = w[v, j]
                s = 0.0
                for ch in range(c):
                    gfm[r, ch] += wj * g[v, ch]
                    s += fm[r, ch] * g[v, ch]
                gt[v, 0] += dw[v, j, 0] * s
                gt[v, 1] += dw[v, j, 1] * s
                gt[v, 2] += dw[v, j, 2] * s


def trilinear_gather_numba(fm, lin, w):
    out = np.zeros((lin.shape[0], fm.shape[1]), dtype=fm.dtype)
    return _tri_gather_nb(np.ascontiguousarray(fm), lin, w.astype(fm.dtype), out)


def trilinear_grads_numba(fm, lin, w, dw, g):
    gfm = np.zeros_like(fm)
    gt = np.zeros((lin.shape[0], 3))
    _tri_grads_nb(np.ascontiguousarray(fm), lin, w.astype(fm.dtype), np.ascontiguousarray(dw),
                  np.ascontiguousarray(g, dtype=fm.dtype), gfm, gt)
    return gfm, gt


def trilinear_gather(fm, lin, w):
    if USE_NUMBA:
        return trilinear_gather_numba(fm, lin, w)
    return trilinear_gather_numpy(fm, lin, w.astype(fm.dtype))


def trilinear_grads(fm, lin, w, dw, g):
    if USE_NUMBA:
        return trilinear_grads_numba(fm, lin, w, dw, g)
    return trilinear_grads_numpy(fm, lin, w.astype(fm.dtype), dw, g.astype(fm.dtype))
