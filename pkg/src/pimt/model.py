"""Tokenizer + encoder backbone shared by pre-training and fine-tuning, and its checkpoint format."""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .encoder import Encoder, EncoderConfig
from .errors import CompatibilityError, PatchSizeError
from .tokenization import Tokenizer

CHECKPOINT_VERSION = "pimt-checkpoint/1"


@dataclass(frozen=True)
class BackboneConfig:
    n_bands: int = 12
    n_channels: int = 4
    window_samples: int = 800
    patch_samples: int = 100
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", EncoderConfig(**self.encoder))
        if self.window_samples % self.patch_samples:
            raise PatchSizeError(
                f"window of {self.window_samples} samples not divisible by patch {self.patch_samples}")

    @property
    def n_patches(self) -> int:
        return self.window_samples // self.patch_samples

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return (self.n_bands, self.n_channels, self.n_patches)

    @property
    def n_tokens(self) -> int:
        return self.n_bands * self.n_channels * self.n_patches

    def to_dict(self) -> dict:
        return asdict(self)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg.patch_samples, cfg.encoder.model_dim, *cfg.grid_shape)
        self.encoder = Encoder(cfg.encoder)

    def embed(self, patches: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.tokenizer(patches, mask)

    def forward(self, patches: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.encoder(self.embed(patches, mask))


def seeded(seed: int, factory, *args, **kwargs):
    """Call ``factory`` under a private torch RNG seeded with ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return factory(*args, **kwargs)


def build_backbone(cfg: BackboneConfig) -> Backbone:
    return seeded(cfg.seed, Backbone, cfg)


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def save_checkpoint(path, modules: dict[str, nn.Module], meta: dict) -> None:
    """Write one archive holding every named tensor of ``modules`` plus JSON-able ``meta``."""
    state = {name: {k: v.detach().cpu() for k, v in m.state_dict().items()} for name, m in modules.items()}
    _atomic_save({"version": CHECKPOINT_VERSION, "meta": meta, "state": state}, Path(path))


def load_checkpoint(path) -> dict:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{path}: unsupported checkpoint version {blob.get('version')!r}")
    return blob


def backbone_from_checkpoint(blob: dict) -> Backbone:
    cfg = BackboneConfig(**blob["meta"]["backbone"])
    bb = Backbone(cfg)
    bb.load_state_dict(blob["state"]["backbone"])
    return bb
