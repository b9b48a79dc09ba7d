"""Synthetic paired (volume, surface mesh, label grid) data.

Shapes are star-shaped blobs: a radius function over directions built from a
few zonal Legendre bumps around random axes, meshed by pushing icosphere
vertices out to that radius.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import legendre
from scipy.ndimage import gaussian_filter

from .mesh import TriMesh, icosphere, load_obj, merge, save_obj, split_components
from .volume import Volume, canonical_transform, load_volume, load_volume_array, save_volume

DATASET_MAGIC = "DSET-1"
FOUR_CENTERS = ((0.45, 0.45, 0.0), (-0.45, 0.45, 0.0), (0.45, -0.45, 0.0), (-0.45, -0.45, 0.0))


@dataclass(frozen=True)
class RadiusFunction:
    """r(d) = r0 * (1 + bumpiness * sum_k a_k P_{l_k}(u_k . d) / sum_k |a_k|)."""

    r0: float
    bumpiness: float
    axes: tuple = ()
    orders: tuple = ()
    amplitudes: tuple = ()
    center: tuple = (0.0, 0.0, 0.0)

    def __call__(self, dirs: np.ndarray) -> np.ndarray:
        dirs = np.asarray(dirs, dtype=np.float64)
        if not self.axes or self.bumpiness == 0:
            return np.full(len(dirs), self.r0)
        amp = np.asarray(self.amplitudes)
        total = np.zeros(len(dirs))
        for u, l, a in zip(self.axes, self.orders, amp):
            coef = np.zeros(l + 1)
            coef[l] = 1.0
            total += a * legendre.legval(dirs @ np.asarray(u), coef)
        return self.r0 * (1.0 + self.bumpiness * total / np.abs(amp).sum())

    def inside(self, points: np.ndarray) -> np.ndarray:
        rel = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        rho = np.linalg.norm(rel, axis=-1)
        safe = np.where(rho > 0, rho, 1.0)
        dirs = rel / safe[..., None]
        r = self(dirs.reshape(-1, 3)).reshape(rho.shape)
        return rho < r

    def params(self) -> dict:
        return {"r0": self.r0, "bumpiness": self.bumpiness, "center": list(self.center),
                "bumps": [{"axis": list(u), "order": l, "amplitude": a}
                          for u, l, a in zip(self.axes, self.orders, self.amplitudes)]}


def generate_shape(seed: int, bumpiness: float, mode_count: int, r0: float = 0.5, subdivisions: int = 4,
                   center=(0.0, 0.0, 0.0)) -> tuple[RadiusFunction, TriMesh]:
    """Random star-shaped surface; deterministic for a given seed."""
    if not 0.0 <= bumpiness <= 0.3:
        raise ValueError(f"bumpiness must be in [0, 0.3], got {bumpiness}")
    if not 0 <= mode_count <= 8:
        raise ValueError(f"mode_count must be in [0, 8], got {mode_count}")
    if r0 * (1 + bumpiness) + np.max(np.abs(center)) > 1.0:
        raise ValueError("shape would leave the [-1, 1]^3 cube")
    rng = np.random.default_rng(seed)
    axes, orders, amps = [], [], []
    for _ in range(mode_count):
        u = rng.normal(size=3)
        axes.append(tuple(float(x) for x in u / np.linalg.norm(u)))
        orders.append(int(rng.integers(1, 5)))
        amps.append(float(rng.uniform(-1.0, 1.0)))
    fn = RadiusFunction(float(r0), float(bumpiness), tuple(axes), tuple(orders), tuple(amps),
                        tuple(float(c) for c in center))
    sph = icosphere(subdivisions)
    verts = np.asarray(center) + sph.vertices * fn(sph.vertices)[:, None]
    # float32-representable so templates copied from these meshes survive the model's precision exactly
    verts = verts.astype(np.float32).astype(np.float64)
    return fn, TriMesh(verts, sph.faces)


def voxel_centers(dims) -> np.ndarray:
    axes = [np.linspace(-1.0, 1.0, d) for d in dims]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack(grid, axis=-1)


def voxelize(shapes, dims=(32, 32, 32), blur: float = 0.0) -> tuple[Volume, np.ndarray]:
    """Occupancy volume (optionally Gaussian-blurred) and integer labels.

    ``shapes`` is one radius function or a list; label k + 1 marks shape k.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 16 or d % 16 for d in dims):
        raise ValueError(f"dims must be >= 16 and divisible by 16, got {dims}")
    shapes = [shapes] if isinstance(shapes, RadiusFunction) else list(shapes)
    pts = voxel_centers(dims)
    labels = np.zeros(dims, dtype=np.uint8)
    for k, s in enumerate(shapes):
        labels[s.inside(pts) & (labels == 0)] = k + 1
    occ = (labels > 0).astype(np.float32)
    if blur > 0:
        occ = gaussian_filter(occ, sigma=blur, mode="constant").astype(np.float32)
    return Volume(occ, canonical_transform(dims)), labels


@dataclass
class SyntheticSample:
    id: str
    volume: Volume
    gt_mesh: TriMesh
    gt_labels: np.ndarray
    shape_params: list
    split: str
    seed: int = 0
    structures: list = field(default_factory=list)

    def structure_meshes(self) -> list[TriMesh]:
        return self.structures or split_components(self.gt_mesh)


def generate_sample(seed: int, dims=(32, 32, 32), bumpiness: float = 0.25, mode_count: int = 6,
                    blur: float = 0.0, subdivisions: int = 4, structures: int = 1, r0: float | None = None,
                    split: str = "train", sample_id: str | None = None) -> SyntheticSample:
    if structures == 1:
        centers = [(0.0, 0.0, 0.0)]
        r0 = 0.5 if r0 is None else r0
    elif structures == 4:
        centers = list(FOUR_CENTERS)
        r0 = 0.22 if r0 is None else r0
    else:
        raise ValueError("structures must be 1 or 4")
    fns, meshes = [], []
    for k, c in enumerate(centers):
        fn, m = generate_shape(seed * 4 + k, bumpiness, mode_count, r0, subdivisions, c)
        fns.append(fn)
        meshes.append(m)
    vol, labels = voxelize(fns, dims, blur)
    if structures == 1:
        labels = (labels > 0).astype(np.uint8)
    return SyntheticSample(sample_id or f"s{seed:06d}", vol, merge(meshes), labels,
                           [f.params() for f in fns], split, seed, meshes)


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

def split_counts(n: int, fractions) -> tuple[int, int, int]:
    fr = np.asarray(fractions, dtype=float)
    if len(fr) != 3 or abs(fr.sum() - 1.0) > 1e-9 or np.any(fr < 0):
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = int(round(n * fr[0]))
    n_val = int(round(n * fr[1]))
    return n_train, n_val, n - n_train - n_val


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def build_dataset(out_dir, n: int = 50, seed: int = 0, split_fractions=(0.8, 0.1, 0.1), dims=(32, 32, 32),
                  bumpiness: float = 0.25, mode_count: int = 6, blur: float = 0.0, subdivisions: int = 4,
                  structures: int = 1) -> dict:
    """Generate ``n`` samples under ``out_dir`` and write ``manifest.json``."""
    out = Path(out_dir)
    counts = split_counts(n, split_fractions)
    splits = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    config = {"n": n, "seed": seed, "split_fractions": list(split_fractions), "dims": list(dims),
              "bumpiness": bumpiness, "mode_count": mode_count, "blur": blur,
              "subdivisions": subdivisions, "structures": structures}
    samples = []
    for i, split in enumerate(splits):
        s_seed = seed * 1_000_003 + i
        sid = f"{split}_{i:04d}"
        smp = generate_sample(s_seed, dims, bumpiness, mode_count, blur, subdivisions, structures,
                              split=split, sample_id=sid)
        rel = Path("samples") / sid
        try:
            vj, vr = save_volume(smp.volume, out / rel.with_name(sid + "_img"))
            lj, lr = save_volume(smp.gt_labels, out / rel.with_name(sid + "_lab"), dtype="u8")
            mp = save_obj(smp.gt_mesh, out / rel.with_name(sid + "_mesh.obj"))
        except OSError as e:
            raise OSError(f"failed writing sample {sid} under {out}: {e}") from e
        samples.append({
            "id": sid, "seed": s_seed, "split": split,
            "volume": str(rel.with_name(sid + "_img")), "labels": str(rel.with_name(sid + "_lab")),
            "mesh": str(rel.with_name(sid + "_mesh.obj")),
            "files_sha256": {p.name: _sha(p) for p in (vj, vr, lj, lr, mp)},
            "shape_params": smp.shape_params,
        })
    manifest = {"magic": DATASET_MAGIC, "config": config, "samples": samples}
    manifest["hash"] = manifest_hash(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


class Dataset:
    """Read-only view of a DSET-1 directory."""

    def __init__(self, root):
        root = Path(root)
        self.root = root.parent if root.name == "manifest.json" else root
        self.manifest = json.loads((self.root / "manifest.json").read_text())
        if self.manifest.get("magic") != DATASET_MAGIC:
            raise ValueError(f"{self.root}: not a dataset manifest")
        self._cache = {}

    @property
    def hash(self) -> str:
        return self.manifest["hash"]

    @property
    def structures(self) -> int:
        return int(self.manifest["config"].get("structures", 1))

    def entries(self, split: str | None = None) -> list[dict]:
        return [s for s in self.manifest["samples"] if split is None or s["split"] == split]

    def load(self, entry: dict) -> SyntheticSample:
        if entry["id"] in self._cache:
            return self._cache[entry["id"]]
        vol = load_volume(self.root / entry["volume"])
        labels, _ = load_volume_array(self.root / entry["labels"])
        mesh = load_obj(self.root / entry["mesh"])
        smp = SyntheticSample(entry["id"], vol, mesh, labels, entry["shape_params"], entry["split"], entry["seed"])
        if self.structures > 1:
            smp.structures = split_components(mesh)
        self._cache[entry["id"]] = smp
        return smp

    def samples(self, split: str | None = None) -> list[SyntheticSample]:
        return [self.load(e) for e in self.entries(split)]
