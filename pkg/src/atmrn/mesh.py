"""Indexed triangle meshes and their derived operators."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .nn import SparseMatrix

log = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


@dataclass(eq=False)
class TriMesh:
    """Vertices (V, 3) float64 and counter-clockwise faces (F, 3) int64."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face (repeated vertex index)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy())

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces)

    def translated(self, t) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(t, float), self.faces)

    def corners(self):
        v, f = self.vertices, self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Geodesic sphere; 12, 42, 162, 642, 2562, 10242, 40962 vertices."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        nf = len(f)
        m01, m12, m20 = (inv[:nf] + len(v), inv[nf:2 * nf] + len(v), inv[2 * nf:] + len(v))
        v = np.concatenate([v, mid])
        f = np.concatenate([
            np.stack([f[:, 0], m01, m20], 1),
            np.stack([f[:, 1], m12, m01], 1),
            np.stack([f[:, 2], m20, m12], 1),
            np.stack([m01, m12, m20], 1),
        ])
    return TriMesh(v * radius, f)


def merge(meshes: list[TriMesh]) -> TriMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += m.n_vertices
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

def edges(mesh: TriMesh) -> np.ndarray:
    """Unique undirected edges (E, 2) with ``e[:, 0] < e[:, 1]``, sorted."""
    f = mesh.faces
    if len(f) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    return np.unique(e, axis=0)


def euler_characteristic(mesh: TriMesh) -> int:
    used = np.unique(mesh.faces) if mesh.n_faces else np.zeros(0)
    return int(len(used) - len(edges(mesh)) + mesh.n_faces)


def is_watertight(mesh: TriMesh) -> bool:
    """Every undirected edge is shared by exactly two faces."""
    f = mesh.faces
    if len(f) == 0:
        return False
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def is_closed_manifold(mesh: TriMesh) -> bool:
    """Watertight, consistently oriented, and every vertex link is one cycle."""
    if not is_watertight(mesh):
        return False
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    if len(np.unique(directed, axis=0)) != len(directed):
        return False
    # link of each vertex: directed edges opposite to it must form one cycle
    nxt = {}
    for a, b, c in f:
        for v, x, y in ((a, b, c), (b, c, a), (c, a, b)):
            nxt.setdefault(int(v), {})[int(x)] = int(y)
    for v, ring in nxt.items():
        start = next(iter(ring))
        cur, steps = start, 0
        while True:
            cur = ring.get(cur)
            steps += 1
            if cur is None or steps > len(ring):
                return False
            if cur == start:
                break
        if steps != len(ring):
            return False
    return True


def connected_components(mesh: TriMesh) -> np.ndarray:
    """Per-vertex component label, numbered by first appearance."""
    from scipy.sparse.csgraph import connected_components as cc

    e = edges(mesh)
    n = mesh.n_vertices
    a = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = cc(a, directed=False)
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[labels]


def split_components(mesh: TriMesh, labels: np.ndarray | None = None) -> list[TriMesh]:
    labels = connected_components(mesh) if labels is None else labels
    out = []
    for k in range(int(labels.max()) + 1 if len(labels) else 0):
        keep = np.flatnonzero(labels == k)
        remap = -np.ones(mesh.n_vertices, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        fmask = labels[mesh.faces[:, 0]] == k
        out.append(TriMesh(mesh.vertices[keep], remap[mesh.faces[fmask]]))
    return out


def vertex_adjacency(mesh: TriMesh) -> sp.csr_matrix:
    n = mesh.n_vertices
    e = edges(mesh)
    r = np.concatenate([e[:, 0], e[:, 1]])
    c = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))


def build_adjacency(mesh: TriMesh) -> SparseMatrix:
    """Symmetric-normalised adjacency with self loops, D^-1/2 (A + I) D^-1/2."""
    a = vertex_adjacency(mesh) + sp.identity(mesh.n_vertices, format="csr")
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    dinv = 1.0 / np.sqrt(deg)
    coo = a.tocoo()
    vals = dinv[coo.row] * coo.data * dinv[coo.col]
    return SparseMatrix.from_triplets(mesh.n_vertices, mesh.n_vertices, coo.row, coo.col, vals)


def uniform_laplacian(mesh: TriMesh) -> SparseMatrix:
    """I - D^-1 A, so ``L @ v`` is each vertex minus the mean of its neighbours."""
    a = vertex_adjacency(mesh)
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    if np.any(deg == 0):
        raise MeshError(f"isolated vertex {int(np.flatnonzero(deg == 0)[0])} has no neighbours")
    coo = a.tocoo()
    n = mesh.n_vertices
    r = np.concatenate([np.arange(n), coo.row])
    c = np.concatenate([np.arange(n), coo.col])
    v = np.concatenate([np.ones(n), -coo.data / deg[coo.row]])
    return SparseMatrix.from_triplets(n, n, r, c, v)


def uniform_laplacian_smooth_residual(mesh: TriMesh) -> np.ndarray:
    return uniform_laplacian(mesh) @ mesh.vertices


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

class NormalStats:
    """Counts zero-area faces skipped by the normal routines."""

    skipped_faces = 0


def face_areas(mesh: TriMesh) -> np.ndarray:
    a, b, c = mesh.corners()
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def surface_area(mesh: TriMesh) -> float:
    return float(face_areas(mesh).sum())


def face_normals(mesh: TriMesh) -> np.ndarray:
    a, b, c = mesh.corners()
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    bad = norm[:, 0] <= 1e-300
    if bad.any():
        NormalStats.skipped_faces += int(bad.sum())
        log.warning("face_normals: %d zero-area faces", int(bad.sum()))
    return np.where(bad[:, None], 0.0, n / np.where(bad[:, None], 1.0, norm))


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted (unnormalised cross products summed) vertex normals."""
    a, b, c = mesh.corners()
    n = np.cross(b - a, c - a)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], n)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.where(norm > 0, norm, 1.0)


def signed_volume(mesh: TriMesh) -> float:
    a, b, c = mesh.corners()
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator):
    """Area-uniform surface samples: (points, unit face normals, face ids)."""
    areas = face_areas(mesh)
    if areas.sum() <= 0:
        raise MeshError("cannot sample a mesh with zero surface area")
    fid = rng.choice(mesh.n_faces, size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (x[fid] for x in mesh.corners())
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, face_normals(mesh)[fid], fid


def taubin_smooth(mesh: TriMesh, iterations: int, lam: float = 0.5, mu: float = -0.53) -> TriMesh:
    """Alternating shrink/inflate uniform-Laplacian smoothing."""
    if iterations == 0:
        return mesh.copy()
    L = uniform_laplacian(mesh).csr()
    v = mesh.vertices.copy()
    for _ in range(iterations):
        v = v - lam * (L @ v)
        v = v - mu * (L @ v)
    return TriMesh(v, mesh.faces.copy())


def mean_template(meshes: list[TriMesh]) -> TriMesh:
    """Vertex-wise mean of meshes sharing one face array."""
    if not meshes:
        raise MeshError("mean_template needs at least one mesh")
    ref = meshes[0]
    bad = [i for i, m in enumerate(meshes)
           if m.n_vertices != ref.n_vertices or not np.array_equal(m.faces, ref.faces)]
    if bad:
        raise MeshError(f"topology mismatch with mesh 0 for meshes {bad}")
    v = np.mean(np.stack([m.vertices for m in meshes]), axis=0)
    return TriMesh(v, ref.faces.copy())


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

def save_obj(mesh: TriMesh, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
