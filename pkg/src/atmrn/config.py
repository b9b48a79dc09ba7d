"""Run configuration: one dataclass tree, loadable from YAML with dotted overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .deformer import DeformerConfig
from .losses import LossWeights
from .params import config_hash
from .template import DecoderConfig, TemplateMode
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class ArchConfig:
    channels: tuple = (8, 16, 32, 64, 128)
    latent: int = 128
    decoder_hidden: int = 512
    decoder_gcn_width: int = 16
    deformer_hidden: int = 64
    deformer_blocks: int = 4
    deformer_layers: int = 3
    resample_per_stage: bool = True

    def unet(self, image_decoder: bool, seg_classes: int) -> UNetConfig:
        return UNetConfig(tuple(self.channels), 1, image_decoder, seg_classes)

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(self.latent, self.decoder_hidden, self.decoder_gcn_width)

    def deformer(self) -> DeformerConfig:
        return DeformerConfig(self.deformer_blocks, self.deformer_layers, self.deformer_hidden,
                              self.resample_per_stage)


@dataclass
class RunConfig:
    dataset: str = ""
    template: str = ""
    template_mode: str = "Ta"
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr_feature_extractor: float = 1e-4
    lr_rest: float = 5e-5
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 1
    epochs: int = 50
    seed: int = 0
    image_decoder: bool = True
    seg_loss: bool = False
    seg_weight: float = 1.0
    gt_sample_factor: int = 10
    val_every: int = 5
    eval_samples: int = 2000
    strict: bool = True

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.arch.channels = tuple(self.arch.channels)
        self.betas = tuple(self.betas)
        try:
            TemplateMode(self.template_mode)
        except ValueError:
            raise ConfigError(f"unknown template_mode {self.template_mode!r}; "
                              f"choose from {[m.value for m in TemplateMode]}") from None
        if self.batch_size != 1:
            raise ConfigError("only batch_size = 1 is supported")
        if len(self.arch.channels) != 5:
            raise ConfigError("arch.channels needs five entries (levels 0-4)")

    @property
    def mode(self) -> TemplateMode:
        return TemplateMode(self.template_mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **kw) -> "RunConfig":
        d = self.to_dict()
        for k, v in kw.items():
            _set_dotted(d, k, v)
        return RunConfig(**d)


def _set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        cur = cur[p]
    if parts[-1] not in cur:
        raise ConfigError(f"unknown config key {key!r}")
    cur[parts[-1]] = value


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """YAML (or JSON) file plus ``key=value`` overrides (values parsed as YAML)."""
    d = RunConfig().to_dict()
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for k, v in _flatten(loaded):
            _set_dotted(d, k, v)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        _set_dotted(d, k.strip(), yaml.safe_load(v))
    try:
        return RunConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k in ("arch", "loss_weights"):
            yield from _flatten(v, key + ".")
        else:
            yield key, v
