"""Staged GCN deformation of a template mesh guided by sampled image features."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import TriMesh
from .nn import SparseMatrix, batchnorm, graph_conv, linear, relu
from .params import ModelParams
from .tensor import Tensor, concat
from .vol2pc import map_pyramid


@dataclass(frozen=True)
class DeformerConfig:
    blocks: int = 4
    layers_per_block: int = 3
    hidden: int = 64
    resample_per_stage: bool = True


@dataclass
class DeformationTrace:
    initial: Tensor
    stages: list = field(default_factory=list)
    faces: np.ndarray | None = None

    def meshes(self) -> list[TriMesh]:
        return [TriMesh(s.data, self.faces) for s in self.stages]


def init_deformer(params: ModelParams, cfg: DeformerConfig, feature_width: int, prefix="deformer"):
    for b in range(cfg.blocks):
        cin = 3 + feature_width
        for l in range(cfg.layers_per_block):
            name = f"{prefix}.block{b}.gc{l}"
            params.kaiming_uniform(f"{name}.w", (cfg.hidden, cin), cin)
            params.zeros(f"{name}.b", (cfg.hidden,))
            params.ones(f"{name}.bn.gamma", (cfg.hidden,))
            params.zeros(f"{name}.bn.beta", (cfg.hidden,))
            params.running_stats(f"{name}.bn", cfg.hidden)
            cin = cfg.hidden
        params.zeros(f"{prefix}.block{b}.proj.w", (3, cfg.hidden))
        params.zeros(f"{prefix}.block{b}.proj.b", (3,))


def deform(template: Tensor, faces: np.ndarray, adj: SparseMatrix, pyramid_maps: list, params: ModelParams,
           cfg: DeformerConfig, training: bool = True, prefix="deformer") -> DeformationTrace:
    """Run the residual deformation blocks; each block adds a displacement."""
    if template.shape[0] != adj.rows:
        raise ValueError(f"template has {template.shape[0]} vertices, adjacency expects {adj.rows}")
    trace = DeformationTrace(template, faces=faces)
    verts = template
    feats = None
    for b in range(cfg.blocks):
        if feats is None or cfg.resample_per_stage:
            feats = map_pyramid(pyramid_maps, verts)
        h = concat([verts, feats], axis=1)
        for l in range(cfg.layers_per_block):
            name = f"{prefix}.block{b}.gc{l}"
            h = graph_conv(h, adj, params[f"{name}.w"], params[f"{name}.b"])
            h = batchnorm(h, params[f"{name}.bn.gamma"], params[f"{name}.bn.beta"],
                          params.running_stats(f"{name}.bn", h.shape[1]), training)
            h = relu(h)
        disp = linear(h, params[f"{prefix}.block{b}.proj.w"], params[f"{prefix}.block{b}.proj.b"])
        verts = verts + disp
        trace.stages.append(verts)
    return trace
