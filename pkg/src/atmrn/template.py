"""Adaptive template: a GCN mesh decoder predicting per-subject displacements.

The decoder maps the bottleneck image feature to a displacement mesh, which is
added to the baseline template.  ``TemplateMode`` selects which mesh seeds the
deformation stage.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .decimate import TemplateBundle
from .mesh import build_adjacency
from .nn import graph_conv, linear, relu, sparse_matmul
from .params import ModelParams
from .tensor import Tensor, as_tensor


class TemplateMode(str, enum.Enum):
    Ts = "Ts"                   # baseline (mean / smoothed) template
    Tspe = "Tspe"               # one specific training mesh
    Td = "Td"                   # predicted displacement used directly
    TspePlusTd = "TspePlusTd"   # specific mesh + displacement
    Ta = "Ta"                   # baseline + displacement (adaptive)

    @property
    def needs_decoder(self) -> bool:
        return self in (TemplateMode.Td, TemplateMode.TspePlusTd, TemplateMode.Ta)


@dataclass(frozen=True)
class DecoderConfig:
    latent: int = 128
    hidden: int = 512
    gcn_width: int = 16


class TemplateError(ValueError):
    pass


def level_adjacencies(bundle: TemplateBundle) -> list:
    return [build_adjacency(m) for m in bundle.levels]


def init_decoder(params: ModelParams, cfg: DecoderConfig, in_features: int, level_sizes, prefix="decoder"):
    """Register decoder weights; the last graph conv starts at zero so T_d = 0."""
    params.kaiming_uniform(f"{prefix}.fc1.w", (cfg.hidden, in_features), in_features)
    params.bias_uniform(f"{prefix}.fc1.b", cfg.hidden, in_features)
    params.kaiming_uniform(f"{prefix}.fc2.w", (cfg.latent, cfg.hidden), cfg.hidden)
    params.bias_uniform(f"{prefix}.fc2.b", cfg.latent, cfg.hidden)
    n_coarse = level_sizes[4] * 3
    params.kaiming_uniform(f"{prefix}.fc3.w", (n_coarse, cfg.latent), cfg.latent)
    params.bias_uniform(f"{prefix}.fc3.b", n_coarse, cfg.latent)
    widths = [3, cfg.gcn_width, cfg.gcn_width, cfg.gcn_width, 3]
    for j in range(4):
        cin, cout = widths[j], widths[j + 1]
        if j == 3:
            params.zeros(f"{prefix}.gc{j}.w", (cout, cin))
            params.zeros(f"{prefix}.gc{j}.b", (cout,))
        else:
            params.kaiming_uniform(f"{prefix}.gc{j}.w", (cout, cin), cin)
            params.bias_uniform(f"{prefix}.gc{j}.b", cout, cin)


def decode_displacement(x4: Tensor, bundle: TemplateBundle, params: ModelParams, adjs=None,
                        prefix: str = "decoder") -> Tensor:
    """Bottleneck feature -> (N, 3) displacement with the baseline's topology.

    flatten -> FC -> latent -> FC -> coarsest-level coordinates, then four
    blocks of (up-matrix, graph conv, activation) from coarse to fine.
    """
    x4 = as_tensor(x4)
    adjs = level_adjacencies(bundle) if adjs is None else adjs
    sizes = bundle.level_sizes
    w3 = params[f"{prefix}.fc3.w"]
    if w3.shape[0] != sizes[4] * 3:
        raise TemplateError(f"decoder expects a coarsest level of {w3.shape[0] // 3} vertices, "
                            f"bundle has {sizes[4]}")
    if params[f"{prefix}.fc1.w"].shape[1] != x4.size:
        raise TemplateError(f"decoder expects {params[f'{prefix}.fc1.w'].shape[1]} bottleneck values, got {x4.size}")
    h = x4.reshape(1, -1)
    h = relu(linear(h, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    z = relu(linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"]))
    v = linear(z, w3, params[f"{prefix}.fc3.b"]).reshape(sizes[4], 3)
    for j in range(4):
        level = 3 - j
        v = sparse_matmul(bundle.up_matrices[level], v)
        v = graph_conv(v, adjs[level], params[f"{prefix}.gc{j}.w"], params[f"{prefix}.gc{j}.b"])
        if j < 3:
            v = relu(v)
    return v


def compose_template(mode: TemplateMode, t_s, t_spe=None, t_d: Tensor | None = None) -> Tensor:
    """Vertices of the mesh handed to the deformer for ``mode``."""
    mode = TemplateMode(mode)
    if mode.needs_decoder and t_d is None:
        raise TemplateError(f"template mode {mode.value} needs the displacement decoder")
    if mode in (TemplateMode.Tspe, TemplateMode.TspePlusTd) and t_spe is None:
        raise TemplateError(f"template mode {mode.value} needs a specific template")

    def verts(m):
        return as_tensor(m.vertices if hasattr(m, "vertices") else m)

    if mode is TemplateMode.Ts:
        return verts(t_s)
    if mode is TemplateMode.Tspe:
        return verts(t_spe)
    if mode is TemplateMode.Td:
        return t_d
    base = verts(t_s) if mode is TemplateMode.Ta else verts(t_spe)
    return base + t_d
