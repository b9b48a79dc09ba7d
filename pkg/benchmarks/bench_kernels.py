"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is called once untimed (to trigger JIT compilation), then timed
``repeat`` times; the best time is reported together with the max abs
difference between the two backends.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from atmrn import _kernels as K
from atmrn.mesh import icosphere
from atmrn.nn import _im2col


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def maxdiff(a, b):
    if isinstance(a, tuple):
        return max(maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))))


def cases(rng):
    idx = rng.integers(0, 25_000, 200_000)
    vals = rng.standard_normal((200_000, 16)).astype(np.float32)
    yield ("scatter_add_rows 200k x 16 -> 25k",
           lambda: K.scatter_add_rows_numpy(25_000, idx, vals),
           lambda: K.scatter_add_rows_numba(25_000, idx, vals))

    m = icosphere(4, 0.5)
    tri = [m.vertices[m.faces[:, j]] for j in range(3)]
    pts = rng.uniform(-0.7, 0.7, (4000, 3))
    yield (f"closest_point_triangles 4000 pts x {m.n_faces} faces",
           lambda: K.closest_point_triangles_numpy(pts, *tri),
           lambda: K.closest_point_triangles_numba(pts, *tri))

    xp = rng.standard_normal((1, 16, 18, 18, 18)).astype(np.float32)
    cols, osp = _im2col(xp, 3, 1)
    g = rng.standard_normal(cols.shape).astype(np.float32)
    yield ("col2im 16ch 16^3 k3 s1",
           lambda: K.col2im_numpy(g, xp.shape, 3, 1, osp),
           lambda: K.col2im_numba(g, xp.shape, 3, 1, osp))

    fm = rng.standard_normal((32 ** 3, 8)).astype(np.float32)
    lin = rng.integers(0, 32 ** 3, (25_000, 8))
    w = rng.random((25_000, 8))
    dw = rng.random((25_000, 8, 3))
    gg = rng.standard_normal((25_000, 8)).astype(np.float32)

    def tri_np():
        return K.trilinear_gather_numpy(fm, lin, w.astype(np.float32)), \
            *K.trilinear_grads_numpy(fm, lin, w.astype(np.float32), dw, gg)

    def tri_nb():
        return K.trilinear_gather_numba(fm, lin, w), *K.trilinear_grads_numba(fm, lin, w, dw, gg)

    yield "trilinear gather+grads 25k pts, 8ch", tri_np, tri_nb


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':48s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max|diff|':>10s}")
    for name, f_np, f_nb in cases(rng):
        t_np = best_of(f_np, args.repeat)
        t_nb = best_of(f_nb, args.repeat)
        d = maxdiff(f_np(), f_nb())
        print(f"{name:48s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.1f} {d:10.2e}")


if __name__ == "__main__":
    main()
