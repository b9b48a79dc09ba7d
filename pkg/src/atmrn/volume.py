"""3-D scalar volumes, their file format, and isosurface extraction."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import TriMesh

VOLUME_VERSION = "VOL-1"
_DTYPES = {"f32": "<f4", "u8": "u1"}


def canonical_transform(dims) -> np.ndarray:
    """Voxel-centre convention: index 0 -> -1, index S-1 -> +1 on each axis."""
    t = np.zeros((3, 4))
    for k, s in enumerate(dims):
        t[k, k] = 2.0 / (s - 1)
        t[k, 3] = -1.0
    return t


@dataclass(eq=False)
class Volume:
    """Scalar grid indexed (D, H, W) with an index -> normalised-coordinate affine."""

    voxels: np.ndarray
    transform: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {v.shape}")
        self.voxels = np.clip(v, 0.0, 1.0)
        self.transform = canonical_transform(v.shape) if self.transform is None else np.asarray(self.transform, float)
        if self.transform.shape != (3, 4) or abs(np.linalg.det(self.transform[:, :3])) < 1e-12:
            raise ValueError("transform must be an invertible 3x4 affine")

    @property
    def dims(self) -> tuple:
        return self.voxels.shape

    def index_to_world(self, ijk: np.ndarray) -> np.ndarray:
        return ijk @ self.transform[:, :3].T + self.transform[:, 3]

    def world_to_index(self, xyz: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.transform[:, :3], (np.asarray(xyz) - self.transform[:, 3]).T).T


def save_volume(vol_or_array, path, dtype: str = "f32", transform=None) -> tuple[Path, Path]:
    """Write ``<name>.json`` header and ``<name>.raw`` little-endian voxels."""
    if isinstance(vol_or_array, Volume):
        arr, transform = vol_or_array.voxels, vol_or_array.transform
    else:
        arr = np.asarray(vol_or_array)
        transform = canonical_transform(arr.shape) if transform is None else transform
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    header = {"version": VOLUME_VERSION, "dims": list(arr.shape), "dtype": dtype,
              "transform": [float(x) for x in np.asarray(transform).reshape(-1)]}
    jp, rp = Path(str(base) + ".json"), Path(str(base) + ".raw")
    jp.write_text(json.dumps(header))
    rp.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    return jp, rp


def load_volume_array(path) -> tuple[np.ndarray, dict]:
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    header = json.loads(Path(str(base) + ".json").read_text())
    if header.get("version") != VOLUME_VERSION:
        raise ValueError(f"{base}: unsupported volume version {header.get('version')!r}")
    arr = np.frombuffer(Path(str(base) + ".raw").read_bytes(), dtype=_DTYPES[header["dtype"]])
    return arr.reshape(header["dims"]).copy(), header


def load_volume(path) -> Volume:
    arr, header = load_volume_array(path)
    return Volume(arr, np.array(header["transform"]).reshape(3, 4))


def marching_cubes(vol: Volume, iso: float) -> TriMesh:
    """Isosurface at ``iso`` in normalised coordinates.

    Faces are oriented so normals point toward lower intensity (outward for a
    bright object).  An isosurface outside the value range gives an empty mesh.
    """
    from skimage.measure import marching_cubes as _mc

    v = vol.voxels
    if not (v.min() < iso < v.max()):
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = _mc(v, level=iso, method="lewiner", allow_degenerate=False)
    # skimage winds faces with normals toward higher values; flip to point outward
    faces = faces[:, ::-1]
    return TriMesh(vol.index_to_world(verts.astype(np.float64)), faces)
