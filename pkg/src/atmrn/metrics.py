"""Surface-distance evaluation metrics (ASSD, Hausdorff) and report files."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .mesh import MeshError, TriMesh, sample_surface


def point_to_surface(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Exact Euclidean distance from each point to the nearest triangle of ``mesh``."""
    a, b, c = mesh.corners()
    d2, _, _ = _kernels.closest_point_triangles(points, a, b, c)
    return np.sqrt(np.maximum(d2, 0.0))


def directed_distances(pred: TriMesh, gt: TriMesh, samples: int = 10_000, seed=0):
    """Distances pred-samples -> gt surface and gt-samples -> pred surface."""
    if pred.n_faces == 0 or gt.n_faces == 0:
        raise MeshError("surface distance needs two non-empty meshes")
    # each mesh is sampled from its own stream so swapping arguments swaps the outputs
    ps, _, _ = sample_surface(pred, samples, np.random.default_rng(seed))
    gs, _, _ = sample_surface(gt, samples, np.random.default_rng(seed))
    return point_to_surface(ps, gt), point_to_surface(gs, pred)


def _sym(fn, pred, gt, samples, seed):
    return fn(*directed_distances(pred, gt, samples, seed))


def assd(pred: TriMesh, gt: TriMesh, samples_per_mesh: int = 10_000, seed=0) -> float:
    """Average symmetric surface distance (mean of the two directed means)."""
    return float(_sym(lambda x, y: 0.5 * (x.mean() + y.mean()), pred, gt, samples_per_mesh, seed))


def hausdorff(pred: TriMesh, gt: TriMesh, samples_per_mesh: int = 10_000, seed=0) -> float:
    """Maximum over both directions of the point-to-surface distance."""
    return float(_sym(lambda x, y: max(x.max(), y.max()), pred, gt, samples_per_mesh, seed))


def surface_metrics(pred: TriMesh, gt: TriMesh, samples_per_mesh: int = 10_000, seed=0) -> dict:
    """ASSD, HD and HD90 from one shared sampling."""
    x, y = _sym(lambda x, y: (x, y), pred, gt, samples_per_mesh, seed)
    return {
        "assd": float(0.5 * (x.mean() + y.mean())),
        "hd": float(max(x.max(), y.max())),
        "hd90": float(max(np.percentile(x, 90), np.percentile(y, 90))),
    }


@dataclass
class MetricsReport:
    """Per-subject, per-structure and averaged surface metrics."""

    rows: list = field(default_factory=list)
    template_mode: str = ""
    config_hash: str = ""
    config: dict = field(default_factory=dict)
    dataset_hash: str = ""
    skipped: int = 0

    def add(self, subject: str, structure: str, m: dict):
        self.rows.append({"subject": subject, "structure": structure, **m})

    def summary(self) -> dict:
        out = {}
        structures = sorted({r["structure"] for r in self.rows})
        for s in structures:
            rs = [r for r in self.rows if r["structure"] == s]
            out[s] = {k: float(np.mean([r[k] for r in rs])) for k in ("assd", "hd", "hd90")}
            out[s]["n"] = len(rs)
        if self.rows:
            out["average"] = {k: float(np.mean([out[s][k] for s in structures])) for k in ("assd", "hd", "hd90")}
            out["average"]["n"] = len({r["subject"] for r in self.rows})
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary()
        return d

    def save(self, prefix) -> tuple[Path, Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        jp, cp = prefix.with_suffix(".json"), prefix.with_suffix(".csv")
        jp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        with open(cp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["subject", "structure", "assd", "hd", "hd90"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in w.fieldnames})
        return jp, cp

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        d.pop("summary", None)
        return cls(**d)
