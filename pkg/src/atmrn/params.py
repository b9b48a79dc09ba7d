"""Parameter store, Adam optimiser and checkpoint files."""
from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .nn import RunningStats
from .tensor import Tensor, default_dtype

CKPT_MAGIC = "ATMRN-CKPT-1"


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ModelParams:
    """Ordered name -> trainable Tensor map plus non-trainable buffers."""

    def __init__(self, seed: int = 0, arch_hash: str = ""):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.seed = seed
        self.arch_hash = arch_hash
        self.rng = np.random.default_rng(seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries.items())

    def __len__(self):
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=default_dtype()), requires_grad=True, name=name)
        self.entries[name] = t
        return t

    # -- initialisers ----------------------------------------------------
    def kaiming_uniform(self, name: str, shape: tuple, fan_in: int) -> Tensor:
        bound = math.sqrt(6.0 / fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def bias_uniform(self, name: str, n: int, fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=(n,)))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def running_stats(self, name: str, c: int) -> RunningStats:
        mk, vk = f"{name}.running_mean", f"{name}.running_var"
        if mk not in self.buffers:
            self.buffers[mk] = np.zeros(c)
            self.buffers[vk] = np.ones(c)
        return RunningStats(self.buffers[mk], self.buffers[vk])

    def zero_grad(self):
        for t in self.entries.values():
            t.grad = None

    def grad_norms(self) -> dict:
        return {n: float(np.linalg.norm(t.grad)) for n, t in self.entries.items() if t.grad is not None}


class Adam:
    """Adam with per-parameter learning rates resolved from name prefixes.

    ``groups`` maps a name prefix to a learning rate; the longest matching
    prefix wins and ``lr`` is the fallback.
    """

    def __init__(self, params: ModelParams, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 groups: dict | None = None):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.groups = dict(groups or {})
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def lr_for(self, name: str) -> float:
        best, lr = -1, self.lr
        for prefix, glr in self.groups.items():
            if name.startswith(prefix) and len(prefix) > best:
                best, lr = len(prefix), glr
        return lr

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = self.lr_for(name) * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype)


def save_checkpoint(prefix, params: ModelParams, optimizer: Adam | None = None, config: dict | None = None,
                    extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` (manifest) and ``<prefix>.bin`` (little-endian arrays)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    arrays, entries = [], []

    def push(kind, name, arr):
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<").str
        entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "dtype": dt})
        arrays.append(np.ascontiguousarray(arr, dtype=dt))

    for name, t in params:
        push("param", name, t.data)
    for name, b in params.buffers.items():
        push("buffer", name, b)
    opt_state = None
    if optimizer is not None:
        for name in sorted(optimizer.m):
            push("adam_m", name, optimizer.m[name])
            push("adam_v", name, optimizer.v[name])
        opt_state = {"t": optimizer.t, "betas": list(optimizer.betas), "eps": optimizer.eps,
                     "lr": optimizer.lr, "groups": optimizer.groups}
    manifest = {
        "magic": CKPT_MAGIC,
        "arch_hash": params.arch_hash,
        "seed": params.seed,
        "entries": entries,
        "optimizer": opt_state,
        "config": config,
        "extra": extra or {},
    }
    jpath, bpath = prefix.with_suffix(".json"), prefix.with_suffix(".bin")
    with open(bpath, "wb") as fh:
        for a in arrays:
            fh.write(a.tobytes())
    jpath.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return jpath, bpath


def read_checkpoint(prefix) -> tuple[dict, dict]:
    """Return (manifest, {(kind, name): array})."""
    prefix = Path(prefix)
    jpath = prefix if prefix.suffix == ".json" else prefix.with_suffix(".json")
    manifest = json.loads(jpath.read_text())
    if manifest.get("magic") != CKPT_MAGIC:
        raise CheckpointError(f"{jpath}: not a checkpoint (magic {manifest.get('magic')!r})")
    blob = jpath.with_suffix(".bin").read_bytes()
    expected = sum(int(np.prod(e["shape"])) * np.dtype(e["dtype"]).itemsize for e in manifest["entries"])
    if expected != len(blob):
        raise CheckpointError(f"{jpath}: blob size {len(blob)} does not match manifest ({expected})")
    out, off = {}, 0
    for e in manifest["entries"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(e["shape"]).copy()
        off += n * dt.itemsize
        out[(e["kind"], e["name"])] = arr
    return manifest, out


def load_into(prefix, params: ModelParams, optimizer: Adam | None = None) -> dict:
    """Load arrays into an already-constructed ``params``; the architecture hash must match."""
    manifest, arrays = read_checkpoint(prefix)
    if manifest["arch_hash"] != params.arch_hash:
        raise CheckpointError(
            f"architecture hash mismatch: checkpoint {manifest['arch_hash']} vs model {params.arch_hash}")
    names = [n for k, n in arrays if k == "param"]
    if names != params.names():
        raise CheckpointError("parameter name set differs from the model")
    for name, t in params:
        t.data = arrays[("param", name)].astype(t.data.dtype)
    for name in params.buffers:
        params.buffers[name][...] = arrays[("buffer", name)]
    if optimizer is not None and manifest.get("optimizer"):
        optimizer.t = manifest["optimizer"]["t"]
        for (kind, name), arr in arrays.items():
            if kind == "adam_m":
                optimizer.m[name] = arr
            elif kind == "adam_v":
                optimizer.v[name] = arr
    return manifest
