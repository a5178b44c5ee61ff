"""Six-objective reconstruction pre-training.

Objectives: AE (reconstruct patches from clean tokens), MR (from masked
tokens), A/P (FFT amplitude/phase from clean tokens), MA/MP (amplitude/phase
from masked tokens). Each has its own two-layer MLP decoder; the backbone is
shared. The loss is a lambda-weighted sum of per-task mean absolute errors,
with phase errors wrapped onto (-pi, pi].
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, DimensionError, TrainingDivergenceError
from .model import Backbone, BackboneConfig, build_backbone, seeded
from .sigproc import augment_noise
from .tokenization import PatchGrid, batch_masks, patchify

log = logging.getLogger(__name__)

OBJECTIVES = ("AE", "MR", "A", "P", "MA", "MP")
MASKED_OBJECTIVES = frozenset({"MR", "MA", "MP"})
PHASE_OBJECTIVES = frozenset({"P", "MP"})
AMPLITUDE_FLOOR = 1e-8
DECODER_HIDDEN = 64


def validate_objectives(objectives: Iterable[str]) -> tuple[str, ...]:
    objs = tuple(o for o in OBJECTIVES if o in set(objectives))
    unknown = set(objectives) - set(OBJECTIVES)
    if unknown:
        raise ConfigurationError(f"unknown objectives {sorted(unknown)}")
    if not objs:
        raise ConfigurationError("at least one objective must be enabled")
    return objs


@dataclass
class LossWeights:
    AE: float = 2.0
    MR: float = 2.0
    A: float = 1.0
    P: float = 1.0
    MA: float = 1.0
    MP: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigurationError(f"lambda for {k} must be non-negative, got {v}")

    def __getitem__(self, task: str) -> float:
        return getattr(self, task)


@dataclass
class PretrainConfig:
    batch_size: int = 256
    lr_max: float = 0.01
    lr_min: float = 0.001
    weight_decay: float = 0.01
    epochs: int = 10
    mask_ratio: float = 0.5
    mask_mode: str = "uniform"
    noise_sigma_rel: float = 0.05
    grad_clip: float = 1.0
    mr_masked_only: bool = False
    heldout_frac: float = 0.2
    eval_batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.lr_max, self.lr_min, self.epochs, self.eval_batch_size) <= 0:
            raise ConfigurationError(f"pretrain settings must be positive: {self}")


@dataclass
class SpectralTarget:
    amplitude: np.ndarray
    phase: np.ndarray


def spectral_targets(patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """rFFT amplitude and principal phase along the last axis; phase is 0 where amplitude < 1e-8."""
    spec = torch.fft.rfft(patches, dim=-1)
    amp = spec.abs()
    phase = torch.where(amp < AMPLITUDE_FLOOR, torch.zeros_like(amp), torch.angle(spec))
    return amp, phase


def fft_targets(grid: PatchGrid) -> SpectralTarget:
    if grid.shape[-1] % 2:
        raise DimensionError(f"patch width must be even, got {grid.shape[-1]}")
    amp, phase = spectral_targets(torch.as_tensor(grid.patches, dtype=torch.float64))
    return SpectralTarget(amp.numpy(), phase.numpy())


def wrapped_abs_diff(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.abs(torch.remainder(a - b + math.pi, 2 * math.pi) - math.pi)


def task_mae(task: str, recon, target, weight=None) -> torch.Tensor:
    """Mean absolute error for one task; ``weight`` (0/1 or real) restricts the average."""
    recon, target = torch.as_tensor(recon), torch.as_tensor(target)
    if recon.shape != target.shape:
        raise DimensionError(f"{task}: reconstruction {tuple(recon.shape)} vs target {tuple(target.shape)}")
    err = wrapped_abs_diff(recon, target) if task in PHASE_OBJECTIVES else (recon - target).abs()
    if weight is None:
        return err.mean()
    weight = torch.as_tensor(weight, dtype=err.dtype).expand_as(err)
    return (err * weight).sum() / weight.sum().clamp_min(1e-12)


def loss_total(recons: dict, targets: dict, weights: LossWeights | None = None,
               loss_weights: dict | None = None) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of per-task MAEs.

    ``loss_weights`` optionally maps task -> element weights (used to drop
    near-zero-amplitude bins from the phase loss, or to restrict MR to
    masked patches). Returns the total and a per-task breakdown.
    """
    weights = weights or LossWeights()
    loss_weights = loss_weights or {}
    total = None
    breakdown = {}
    for task in recons:
        term = task_mae(task, recons[task], targets[task], loss_weights.get(task))
        if not torch.isfinite(term):
            raise TrainingDivergenceError(f"non-finite {task} loss ({term.item()})")
        breakdown[task] = float(term.detach())
        term = weights[task] * term
        total = term if total is None else total + term
    return total, breakdown


def target_width(task: str, patch_samples: int) -> int:
    return patch_samples if task in ("AE", "MR") else patch_samples // 2 + 1


class PretrainModel(nn.Module):
    def __init__(self, backbone: Backbone, objectives: Iterable[str], hidden: int = DECODER_HIDDEN):
        super().__init__()
        self.backbone = backbone
        self.objectives = validate_objectives(objectives)
        d, w = backbone.cfg.encoder.model_dim, backbone.cfg.patch_samples
        self.decoders = nn.ModuleDict({
            t: nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, target_width(t, w)))
            for t in self.objectives
        })

    @property
    def needs_mask(self) -> bool:
        return bool(MASKED_OBJECTIVES & set(self.objectives))

    def decode(self, z: torch.Tensor, task: str) -> torch.Tensor:
        if task not in self.decoders:
            raise ConfigurationError(f"objective {task!r} is not enabled")
        out = self.decoders[task](z)
        return out.reshape(out.shape[:-2] + self.backbone.cfg.grid_shape + out.shape[-1:])

    def forward(self, patches: torch.Tensor, mask: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        z = zm = None
        if set(self.objectives) - MASKED_OBJECTIVES:
            z = self.backbone(patches)
        if self.needs_mask:
            if mask is None:
                raise ConfigurationError("masked objectives need a mask")
            zm = self.backbone(patches, mask)
        return {t: self.decode(zm if t in MASKED_OBJECTIVES else z, t) for t in self.objectives}

    def targets(self, patches: torch.Tensor, mask: torch.Tensor | None = None,
                mr_masked_only: bool = False) -> tuple[dict, dict]:
        """Targets always come from the uncorrupted patches."""
        amp, phase = spectral_targets(patches)
        valid = (amp >= AMPLITUDE_FLOOR).to(patches.dtype)
        full = {"AE": patches, "MR": patches, "A": amp, "MA": amp, "P": phase, "MP": phase}
        targets = {t: full[t] for t in self.objectives}
        lw = {t: valid for t in self.objectives if t in PHASE_OBJECTIVES}
        if mr_masked_only and "MR" in self.objectives and mask is not None:
            lw["MR"] = mask[..., None].to(patches.dtype)
        return targets, lw


@dataclass
class PretrainResult:
    model: PretrainModel
    curves: list[dict] = field(default_factory=list)
    train_index: np.ndarray | None = None
    heldout_index: np.ndarray | None = None

    def final(self, split: str = "heldout") -> dict:
        return [r for r in self.curves if r["split"] == split][-1]

    def initial(self, split: str = "heldout") -> dict:
        return [r for r in self.curves if r["split"] == split][0]


def split_indices(n: int, heldout_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded window-level split; returns (train, heldout) index arrays."""
    perm = np.random.default_rng(seed).permutation(n)
    n_held = int(round(heldout_frac * n))
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 1:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / (total - 1)))


def _to_patches(windows: np.ndarray, w: int) -> torch.Tensor:
    return patchify(torch.as_tensor(windows, dtype=torch.float32), w)


def evaluate_pretrain(model: PretrainModel, windows: np.ndarray, weights: LossWeights,
                      cfg: PretrainConfig, mask_seed: int) -> dict:
    """Mean per-task losses over ``windows`` with fixed masks and no augmentation."""
    model.eval()
    w = model.backbone.cfg.patch_samples
    rng = np.random.default_rng(mask_seed)
    sums: dict[str, float] = {}
    n_total = 0
    with torch.no_grad():
        for start in range(0, len(windows), cfg.eval_batch_size):
            chunk = windows[start:start + cfg.eval_batch_size]
            patches = _to_patches(chunk, w)
            mask = None
            if model.needs_mask:
                mask = torch.as_tensor(batch_masks(len(chunk), model.backbone.cfg.grid_shape,
                                                   cfg.mask_ratio, cfg.mask_mode, rng))
            recons = model(patches, mask)
            targets, lw = model.targets(patches, mask, cfg.mr_masked_only)
            total, parts = loss_total(recons, targets, weights, lw)
            parts["total"] = float(total.detach())
            if "MR" in recons and mask is not None:
                parts["MR_masked"] = float(task_mae("MR", recons["MR"], targets["MR"], mask[..., None].float()))
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(chunk)
            n_total += len(chunk)
    return {k: v / n_total for k, v in sums.items()}


def run_pretrain(train_windows: np.ndarray, heldout_windows: np.ndarray, backbone_cfg: BackboneConfig,
                 cfg: PretrainConfig | None = None, objectives: Iterable[str] = OBJECTIVES,
                 weights: LossWeights | None = None) -> PretrainResult:
    """Pre-train a fresh backbone on band-decomposed windows shaped (n, F, C, T).

    Row ``epoch=0`` of the returned curves is the loss before any update.
    """
    cfg = cfg or PretrainConfig()
    weights = weights or LossWeights()
    if len(train_windows) == 0:
        raise ConfigurationError("pre-training set is empty")
    backbone = build_backbone(backbone_cfg)
    model = seeded(cfg.seed, PretrainModel, backbone, objectives)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr_max, weight_decay=cfg.weight_decay)
    w = backbone_cfg.patch_samples
    n = len(train_windows)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    eval_seed = cfg.seed + 7919
    result = PretrainResult(model)

    def record(epoch: int, split: str, losses: dict):
        result.curves.append({"epoch": epoch, "split": split, **losses})

    record(0, "train", evaluate_pretrain(model, train_windows, weights, cfg, eval_seed))
    if len(heldout_windows):
        record(0, "heldout", evaluate_pretrain(model, heldout_windows, weights, cfg, eval_seed))

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = train_windows[idx]
            if cfg.noise_sigma_rel > 0:
                batch = augment_noise(batch, cfg.noise_sigma_rel, seed=int(rng.integers(2**31)))
            patches = _to_patches(batch, w)
            mask = None
            if model.needs_mask:
                mask = torch.as_tensor(batch_masks(len(idx), backbone_cfg.grid_shape,
                                                   cfg.mask_ratio, cfg.mask_mode, rng))
            for group in opt.param_groups:
                group["lr"] = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)
            recons = model(patches, mask)
            targets, lw = model.targets(patches, mask, cfg.mr_masked_only)
            total, parts = loss_total(recons, targets, weights, lw)
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            parts["total"] = float(total.detach())
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        record(epoch, "train", {k: v / n for k, v in sums.items()})
        if len(heldout_windows):
            held = evaluate_pretrain(model, heldout_windows, weights, cfg, eval_seed)
            record(epoch, "heldout", held)
            log.info("epoch %d held-out total %.4f", epoch, held["total"])
    model.eval()
    return result
