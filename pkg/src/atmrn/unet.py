"""U-Net-style 3-D encoder/decoder producing the multi-resolution feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import batchnorm, conv3d, conv3d_transpose, relu
from .params import ModelParams
from .tensor import Tensor, concat


@dataclass(frozen=True)
class UNetConfig:
    channels: tuple = (8, 16, 32, 64, 128)
    in_channels: int = 1
    image_decoder: bool = True
    seg_classes: int = 0          # > 0 adds the 1x1x1 segmentation head on X8


@dataclass
class FeaturePyramid:
    encoder: list                  # X0..X4
    decoder: list = field(default_factory=list)  # X5..X8

    @property
    def maps(self) -> list:
        return self.encoder + self.decoder

    def widths(self) -> list[int]:
        return [m.shape[1] for m in self.maps]


def pyramid_widths(cfg: UNetConfig) -> list[int]:
    ch = list(cfg.channels)
    return ch + (ch[3::-1] if cfg.image_decoder else [])


def _conv_bn(params: ModelParams, name: str, cin: int, cout: int, transpose: bool = False):
    k = 3
    shape = (cin, cout, k, k, k) if transpose else (cout, cin, k, k, k)
    params.kaiming_uniform(f"{name}.w", shape, fan_in=cin * k ** 3)
    params.ones(f"{name}.bn.gamma", (cout,))
    params.zeros(f"{name}.bn.beta", (cout,))
    params.running_stats(f"{name}.bn", cout)


def init_unet(params: ModelParams, cfg: UNetConfig, prefix: str = "unet"):
    ch = cfg.channels
    _conv_bn(params, f"{prefix}.stem", cfg.in_channels, ch[0])
    for i in range(1, 5):
        _conv_bn(params, f"{prefix}.down{i}", ch[i - 1], ch[i])
    if cfg.image_decoder:
        for j in range(1, 5):
            src, dst = ch[5 - j], ch[4 - j]
            _conv_bn(params, f"{prefix}.up{j}.tconv", src, dst, transpose=True)
            _conv_bn(params, f"{prefix}.up{j}.fuse", 2 * dst, dst)
        if cfg.seg_classes:
            c = cfg.seg_classes
            params.kaiming_uniform(f"{prefix}.seg.w", (c, ch[0], 1, 1, 1), fan_in=ch[0])
            params.zeros(f"{prefix}.seg.b", (c,))


def _block(x: Tensor, params: ModelParams, name: str, stride: int, training: bool, transpose=False) -> Tensor:
    w = params[f"{name}.w"]
    y = conv3d_transpose(x, w, None, stride, 1) if transpose else conv3d(x, w, None, stride, 1)
    y = batchnorm(y, params[f"{name}.bn.gamma"], params[f"{name}.bn.beta"],
                  params.running_stats(f"{name}.bn", y.shape[1]), training)
    return relu(y)


def unet_forward(volume, params: ModelParams, cfg: UNetConfig, training: bool = True, prefix: str = "unet"):
    """Return ``(FeaturePyramid, seg_logits or None)`` for one volume.

    ``volume`` is a (D, H, W) array/Volume or a [1, C, D, H, W] tensor; each
    extent must be divisible by 16.
    """
    if hasattr(volume, "voxels"):
        volume = volume.voxels
    x = volume if isinstance(volume, Tensor) else Tensor(np.asarray(volume))
    if x.ndim == 3:
        x = x.reshape((1, 1) + x.shape)
    dims = x.shape[2:]
    if any(d % 16 for d in dims):
        raise ValueError(f"volume dims {tuple(dims)} must be divisible by 16; pad the volume "
                         f"to {tuple(-(-d // 16) * 16 for d in dims)}")
    enc = [_block(x, params, f"{prefix}.stem", 1, training)]
    for i in range(1, 5):
        enc.append(_block(enc[-1], params, f"{prefix}.down{i}", 2, training))
    pyr = FeaturePyramid(enc)
    seg = None
    if cfg.image_decoder:
        h = enc[4]
        for j in range(1, 5):
            up = _block(h, params, f"{prefix}.up{j}.tconv", 2, training, transpose=True)
            h = _block(concat([up, enc[4 - j]], axis=1), params, f"{prefix}.up{j}.fuse", 1, training)
            pyr.decoder.append(h)
        if cfg.seg_classes:
            seg = conv3d(h, params[f"{prefix}.seg.w"], params[f"{prefix}.seg.b"], 1, 0)
    return pyr, seg
