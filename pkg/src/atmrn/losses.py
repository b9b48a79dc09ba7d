"""Mesh losses: Chamfer, Laplacian, normal and edge terms, plus segmentation CE."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import mesh as meshlib
from .mesh import TriMesh
from .nn import SparseMatrix, log_softmax, sparse_matmul
from .tensor import Tensor, as_tensor, cross


@dataclass(frozen=True)
class LossWeights:
    chamfer: float = 5.0
    laplacian: float = 0.1
    normal: float = 0.001
    edge: float = 5.0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class SurfaceTarget:
    """Ground-truth surface samples with normals and a cached KD-tree."""

    points: np.ndarray
    normals: np.ndarray
    tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        if len(self.points) == 0:
            raise ValueError("empty ground-truth point set")
        self.tree = cKDTree(self.points)

    @classmethod
    def sample(cls, mesh: TriMesh, n: int, rng: np.random.Generator) -> "SurfaceTarget":
        pts, nrm, _ = meshlib.sample_surface(mesh, n, rng)
        return cls(pts, nrm)

    @classmethod
    def from_face_centroids(cls, mesh: TriMesh) -> "SurfaceTarget":
        a, b, c = mesh.corners()
        return cls((a + b + c) / 3.0, meshlib.face_normals(mesh))

    @classmethod
    def from_vertices(cls, mesh: TriMesh) -> "SurfaceTarget":
        return cls(mesh.vertices, meshlib.vertex_normals(mesh))


@dataclass(eq=False)
class MeshTopology:
    """Per-topology constants reused by every loss evaluation."""

    faces: np.ndarray
    edges: np.ndarray
    laplacian: SparseMatrix

    @classmethod
    def of(cls, mesh: TriMesh) -> "MeshTopology":
        return cls(mesh.faces, meshlib.edges(mesh), meshlib.uniform_laplacian(mesh))


def nearest_indices(query: np.ndarray, ref: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    """Index into ``ref`` of the nearest point for every query point (KD-tree)."""
    tree = cKDTree(ref) if tree is None else tree
    _, idx = tree.query(np.asarray(query, dtype=np.float64), k=1)
    return np.asarray(idx, dtype=np.int64)


def _as_points(x) -> Tensor:
    if isinstance(x, TriMesh):
        return Tensor(x.vertices)
    return as_tensor(x)


def chamfer(pred, gt_points, gt_tree: cKDTree | None = None) -> Tensor:
    """Mean squared nearest-neighbour distance, pred->gt plus gt->pred."""
    pred = _as_points(pred)
    gt = np.asarray(gt_points.points if isinstance(gt_points, SurfaceTarget) else gt_points, dtype=np.float64)
    if isinstance(gt_points, SurfaceTarget) and gt_tree is None:
        gt_tree = gt_points.tree
    if pred.shape[0] == 0 or len(gt) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    p = pred.data.astype(np.float64)
    i_pg = nearest_indices(p, gt, gt_tree)
    i_gp = nearest_indices(gt, p)
    gtt = Tensor(gt.astype(pred.dtype))
    d_pg = (pred - gtt[i_pg]).square().sum(axis=1).mean()
    d_gp = (pred[i_gp] - gtt).square().sum(axis=1).mean()
    return d_pg + d_gp


def edge_loss(verts, edges: np.ndarray) -> Tensor:
    """Mean squared edge length."""
    v = _as_points(verts)
    d = v[edges[:, 0]] - v[edges[:, 1]]
    return d.square().sum(axis=1).mean()


def laplacian_loss(verts, laplacian: SparseMatrix) -> Tensor:
    """Mean squared norm of the uniform-Laplacian residual."""
    v = _as_points(verts)
    return sparse_matmul(laplacian, v).square().sum(axis=1).mean()


class DegenerateFaces:
    """Running count of zero-area faces left out of the normal loss."""

    count = 0


def face_normals_t(verts: Tensor, faces: np.ndarray, eps: float = 1e-12):
    """Differentiable unit face normals for non-degenerate faces and their mask."""
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = cross(b - a, c - a)
    sq = n.data.astype(np.float64)
    ok = np.einsum("ij,ij->i", sq, sq) > eps * eps
    DegenerateFaces.count += int((~ok).sum())
    if not ok.any():
        return None, ok
    keep = np.flatnonzero(ok)
    n = n[keep]
    norm = n.square().sum(axis=1, keepdims=True).sqrt()
    return n / norm, ok


def normal_loss(verts, faces: np.ndarray, target: SurfaceTarget) -> Tensor:
    """Mean of 1 - |<pred face normal, normal of nearest gt sample>|."""
    v = _as_points(verts)
    n, ok = face_normals_t(v, faces)
    if n is None:
        return Tensor(np.zeros((), dtype=v.dtype))
    f = faces[ok]
    cent = v.data[f].mean(axis=1).astype(np.float64)
    idx = nearest_indices(cent, target.points, target.tree)
    gn = Tensor(target.normals[idx].astype(v.dtype))
    cos = (n * gn).sum(axis=1)
    return (1.0 - cos.abs()).mean()


def mesh_loss_terms(verts, topo: MeshTopology, target: SurfaceTarget) -> dict:
    v = _as_points(verts)
    return {
        "chamfer": chamfer(v, target),
        "laplacian": laplacian_loss(v, topo.laplacian),
        "normal": normal_loss(v, topo.faces, target),
        "edge": edge_loss(v, topo.edges),
    }


def mesh_loss(stages, topo: MeshTopology, target: SurfaceTarget, w: LossWeights = LossWeights()):
    """Weighted four-term loss summed with equal weight over all stage meshes.

    Returns ``(total, terms)``; ``terms`` holds per-term sums over stages as floats.
    """
    total = None
    sums = {"chamfer": 0.0, "laplacian": 0.0, "normal": 0.0, "edge": 0.0}
    weights = w.as_dict()
    for s in stages:
        terms = mesh_loss_terms(s, topo, target)
        for k, t in terms.items():
            sums[k] += float(t.data)
            part = t * weights[k]
            total = part if total is None else total + part
    if total is None:
        raise ValueError("mesh_loss needs at least one stage")
    return total, sums


def seg_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean voxelwise cross-entropy; ``logits`` is [C, ...] or [1, C, ...]."""
    logits = as_tensor(logits)
    if logits.ndim == labels.ndim + 2:
        logits = logits.reshape(logits.shape[1:])
    c = logits.shape[0]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[1:]:
        raise ValueError(f"label grid {labels.shape} does not match logits {logits.shape[1:]}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    lp = log_softmax(logits.reshape(c, -1), axis=0)
    flat = labels.reshape(-1).astype(np.int64)
    onehot = np.zeros((c, flat.size), dtype=logits.dtype)
    onehot[flat, np.arange(flat.size)] = 1.0
    return -(lp * onehot).sum() * (1.0 / flat.size)
