"""Quadric-error edge-collapse decimation and the multi-level template bundle."""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .mesh import MeshError, TriMesh, is_closed_manifold, load_obj, save_obj
from .nn import SparseMatrix

BUNDLE_MAGIC = "TPLB-1"
MIN_LEVEL_VERTICES = 12
# Fine-to-coarse factors.  FULL_FACTORS gives the N, N/16, N/128, N/512,
# N/2048 ladder and needs N >= 24576 to keep the coarsest level >= 12 vertices.
FULL_FACTORS = (16.0, 8.0, 4.0, 4.0)
DESK_FACTORS = (4.0, 2.0, 2.0, 2.0)


def _plane_quadrics(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(norm > 0, norm, 1.0)
    p = np.concatenate([n, -np.sum(n * a, axis=1, keepdims=True)], axis=1)
    kp = p[:, :, None] * p[:, None, :]
    q = np.zeros((len(v), 4, 4))
    for k in range(3):
        np.add.at(q, f[:, k], kp)
    return q


def _cost(q: np.ndarray, x: np.ndarray) -> float:
    h = np.append(x, 1.0)
    return float(h @ q @ h)


class _Collapser:
    """Mutable half-structure used during decimation."""

    def __init__(self, mesh: TriMesh, fold_cos: float = 0.2):
        self.v = mesh.vertices
        self.faces = [list(map(int, t)) for t in mesh.faces]
        self.alive_f = [True] * len(self.faces)
        self.vf = [set() for _ in range(mesh.n_vertices)]
        for i, (a, b, c) in enumerate(self.faces):
            self.vf[a].add(i)
            self.vf[b].add(i)
            self.vf[c].add(i)
        self.alive_v = np.ones(mesh.n_vertices, dtype=bool)
        self.q = _plane_quadrics(mesh.vertices, mesh.faces)
        self.version = np.zeros(mesh.n_vertices, dtype=np.int64)
        self.fold_cos = fold_cos
        self.n_alive = mesh.n_vertices

    def neighbors(self, u: int) -> set:
        out = set()
        for fi in self.vf[u]:
            out.update(self.faces[fi])
        out.discard(u)
        return out

    def _normal(self, tri):
        a, b, c = (self.v[i] for i in tri)
        return np.cross(b - a, c - a)

    def can_collapse(self, remove: int, keep: int) -> bool:
        nr, nk = self.neighbors(remove), self.neighbors(keep)
        if keep not in nr:
            return False
        # link condition keeps the surface a closed 2-manifold
        if len(nr & nk) != 2:
            return False
        shared = [fi for fi in self.vf[remove] if keep in self.faces[fi]]
        if len(shared) != 2:
            return False
        for fi in self.vf[remove]:
            tri = self.faces[fi]
            if keep in tri:
                continue
            old = self._normal(tri)
            new_tri = [keep if i == remove else i for i in tri]
            new = self._normal(new_tri)
            no, nn = np.linalg.norm(old), np.linalg.norm(new)
            if nn <= 1e-14 * max(no, 1e-300):
                return False
            if np.dot(old, new) < self.fold_cos * no * nn:
                return False
        return True

    def collapse(self, remove: int, keep: int):
        for fi in list(self.vf[remove]):
            tri = self.faces[fi]
            if keep in tri:
                self.alive_f[fi] = False
                for i in tri:
                    self.vf[i].discard(fi)
            else:
                self.faces[fi] = [keep if i == remove else i for i in tri]
                self.vf[keep].add(fi)
        self.vf[remove] = set()
        self.alive_v[remove] = False
        self.q[keep] += self.q[remove]
        self.version[keep] += 1
        self.version[remove] += 1
        self.n_alive -= 1

    def edge_entry(self, a: int, b: int):
        q = self.q[a] + self.q[b]
        ca, cb = _cost(q, self.v[a]), _cost(q, self.v[b])
        lo, hi = (a, b) if a < b else (b, a)
        return (min(ca, cb), lo, hi, int(self.version[a] + self.version[b]))


def decimate(mesh: TriMesh, target_v: int) -> tuple[TriMesh, SparseMatrix, SparseMatrix]:
    """Collapse edges by quadric error until ``target_v`` vertices remain.

    Collapses keep one endpoint in place, so the coarse vertices are a subset
    of the fine ones.  Returns ``(coarse, down, up)`` where ``down`` selects
    kept vertices and ``up`` maps every fine vertex to barycentric weights on
    its nearest coarse triangle (identity rows for kept vertices).
    """
    n = mesh.n_vertices
    if not 4 <= target_v < n:
        raise MeshError(f"target_v must be in [4, {n}), got {target_v}")
    if not is_closed_manifold(mesh):
        raise MeshError("decimate requires a closed, consistently oriented manifold mesh")
    st = _Collapser(mesh)
    heap = []
    from .mesh import edges as _edges
    for a, b in _edges(mesh):
        heapq.heappush(heap, st.edge_entry(int(a), int(b)))
    rejected = set()
    while st.n_alive > target_v and heap:
        cost, a, b, ver = heapq.heappop(heap)
        if not (st.alive_v[a] and st.alive_v[b]) or ver != st.version[a] + st.version[b]:
            continue
        if b not in st.neighbors(a):
            continue
        q = st.q[a] + st.q[b]
        ca, cb = _cost(q, st.v[a]), _cost(q, st.v[b])
        # keep the endpoint with the lower quadric cost; fall back to the other
        order = ((b, a), (a, b)) if ca <= cb else ((a, b), (b, a))
        done = False
        for remove, keep in order:
            if st.can_collapse(remove, keep):
                st.collapse(remove, keep)
                for w in st.neighbors(keep):
                    heapq.heappush(heap, st.edge_entry(keep, w))
                done = True
                break
        if not done:
            rejected.add((a, b))
    if st.n_alive > target_v:
        raise MeshError(f"decimation stalled at {st.n_alive} vertices (target {target_v})")

    kept = np.flatnonzero(st.alive_v)
    remap = -np.ones(n, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    faces = np.array([st.faces[i] for i in range(len(st.faces)) if st.alive_f[i]], dtype=np.int64)
    coarse = TriMesh(mesh.vertices[kept], remap[faces])

    down = SparseMatrix(len(kept), n, np.arange(len(kept)), kept, np.ones(len(kept)))
    up = upsample_matrix(mesh, coarse, kept)
    return coarse, down, up


def upsample_matrix(fine: TriMesh, coarse: TriMesh, kept: np.ndarray) -> SparseMatrix:
    """Barycentric fine-from-coarse interpolation; kept vertices map to themselves."""
    n = fine.n_vertices
    removed = np.setdiff1d(np.arange(n), kept)
    a, b, c = coarse.corners()
    _, fid, bary = _kernels.closest_point_triangles(fine.vertices[removed], a, b, c)
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    rows = np.concatenate([kept, np.repeat(removed, 3)])
    cols = np.concatenate([np.arange(len(kept)), coarse.faces[fid].reshape(-1)])
    vals = np.concatenate([np.ones(len(kept)), bary.reshape(-1)])
    return SparseMatrix.from_triplets(n, coarse.n_vertices, rows, cols, vals)


@dataclass(eq=False)
class TemplateBundle:
    """Baseline mesh plus its four coarser levels and resampling matrices."""

    levels: list
    up_matrices: list
    down_matrices: list
    factors: tuple

    @property
    def baseline(self) -> TriMesh:
        return self.levels[0]

    @property
    def level_sizes(self) -> list[int]:
        return [m.n_vertices for m in self.levels]


def build_template_bundle(baseline: TriMesh, factors=DESK_FACTORS) -> TemplateBundle:
    factors = tuple(float(x) for x in factors)
    if len(factors) != 4 or any(x <= 1 for x in factors):
        raise ValueError(f"need four factors > 1, got {factors}")
    levels, ups, downs = [baseline], [], []
    cur = baseline
    for k, fac in enumerate(factors):
        target = int(round(cur.n_vertices / fac))
        if target < MIN_LEVEL_VERTICES:
            raise MeshError(
                f"level {k + 1} would have {target} vertices (< {MIN_LEVEL_VERTICES}); "
                f"use a denser baseline or smaller factors")
        cur, down, up = decimate(cur, target)
        levels.append(cur)
        ups.append(up)
        downs.append(down)
    return TemplateBundle(levels, ups, downs, factors)


# ---------------------------------------------------------------------------
# TPLB-1 container: per-level OBJs + matrices.json/matrices.bin
# ---------------------------------------------------------------------------

def save_bundle(bundle: TemplateBundle, directory, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(bundle.levels):
        save_obj(m, d / ("baseline.obj" if k == 0 else f"level_{k}.obj"))
    blobs, entries, off = [], [], 0
    for kind, mats in (("up", bundle.up_matrices), ("down", bundle.down_matrices)):
        for k, m in enumerate(mats):
            parts = [m.row_idx.astype("<i8"), m.col_idx.astype("<i8"), m.values.astype("<f8")]
            nbytes = sum(p.nbytes for p in parts)
            entries.append({"kind": kind, "level": k, "rows": m.rows, "cols": m.cols,
                            "nnz": m.nnz, "offset": off})
            blobs.extend(parts)
            off += nbytes
    (d / "matrices.bin").write_bytes(b"".join(p.tobytes() for p in blobs))
    header = {"magic": BUNDLE_MAGIC, "factors": list(bundle.factors), "level_sizes": bundle.level_sizes,
              "matrices": entries, "extra": extra or {}}
    (d / "bundle.json").write_text(json.dumps(header, indent=1))
    return d


def load_bundle(directory) -> tuple[TemplateBundle, dict]:
    d = Path(directory)
    header = json.loads((d / "bundle.json").read_text())
    if header.get("magic") != BUNDLE_MAGIC:
        raise ValueError(f"{d}: not a template bundle")
    levels = [load_obj(d / "baseline.obj")] + [load_obj(d / f"level_{k}.obj") for k in range(1, 5)]
    blob = (d / "matrices.bin").read_bytes()
    ups, downs = [None] * 4, [None] * 4
    for e in header["matrices"]:
        nnz, off = e["nnz"], e["offset"]
        r = np.frombuffer(blob, "<i8", nnz, off)
        c = np.frombuffer(blob, "<i8", nnz, off + 8 * nnz)
        v = np.frombuffer(blob, "<f8", nnz, off + 16 * nnz)
        m = SparseMatrix(e["rows"], e["cols"], r.copy(), c.copy(), v.copy())
        (ups if e["kind"] == "up" else downs)[e["level"]] = m
    return TemplateBundle(levels, ups, downs, tuple(header["factors"])), header.get("extra", {})
