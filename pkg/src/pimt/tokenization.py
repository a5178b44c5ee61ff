"""Patch segmentation, 3D-indexed token embedding, and masking.

Tokens are flattened frequency-first, then channel, then time:
``index = (f * C + c) * L + l``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DimensionError, InvalidParameterError, PatchSizeError
from .sigproc import BandStack

SUPPORTED_PATCH_SAMPLES = (50, 100, 200, 400)


@dataclass
class PatchGrid:
    """Non-overlapping patches shaped (F, C, L, w)."""

    patches: np.ndarray
    fs: float

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.patches.shape)

    @property
    def n_tokens(self) -> int:
        F, C, L, _ = self.shape
        return F * C * L

    def concat(self) -> np.ndarray:
        """Undo segmentation: (F, C, L*w)."""
        F, C, L, w = self.shape
        return self.patches.reshape(F, C, L * w)


def segment(win, w: int) -> PatchGrid:
    """Split a window (BandStack or array ending in time) into patches of ``w`` samples."""
    if isinstance(win, BandStack):
        data, fs = win.data, win.fs
    else:
        data, fs = np.asarray(win), float("nan")
    n = data.shape[-1]
    if w <= 0 or n % w:
        raise PatchSizeError(f"window length {n} is not divisible by patch size {w}")
    return PatchGrid(data.reshape(data.shape[:-1] + (n // w, w)), fs)


def patchify(windows: np.ndarray | torch.Tensor, w: int):
    """Batched segmentation: (..., T) -> (..., T // w, w)."""
    n = windows.shape[-1]
    if n % w:
        raise PatchSizeError(f"window length {n} is not divisible by patch size {w}")
    return windows.reshape(tuple(windows.shape[:-1]) + (n // w, w))


def token_index(f: int, c: int, l: int, n_channels: int, n_patches: int) -> int:
    return (f * n_channels + c) * n_patches + l


def index_map(F: int, C: int, L: int) -> np.ndarray:
    """Row ``i`` holds the (f, c, l) coordinates of token ``i``."""
    f, c, l = np.meshgrid(np.arange(F), np.arange(C), np.arange(L), indexing="ij")
    return np.stack([f.ravel(), c.ravel(), l.ravel()], axis=1)


@dataclass
class TokenSequence:
    embeddings: torch.Tensor  # (..., N, d)
    grid_shape: tuple[int, int, int]

    @property
    def index_map(self) -> np.ndarray:
        return index_map(*self.grid_shape)


class Tokenizer(nn.Module):
    """Shared linear patch projection plus additive per-axis positional tables.

    Also owns the learnable mask patch that replaces masked patches before
    projection.
    """

    def __init__(self, patch_samples: int, dim: int, n_bands: int, n_channels: int, n_patches: int):
        super().__init__()
        self.grid_shape = (n_bands, n_channels, n_patches)
        self.patch_samples = patch_samples
        self.dim = dim
        self.proj = nn.Linear(patch_samples, dim)
        self.pos_f = nn.Parameter(0.02 * torch.randn(n_bands, dim))
        self.pos_c = nn.Parameter(0.02 * torch.randn(n_channels, dim))
        self.pos_l = nn.Parameter(0.02 * torch.randn(n_patches, dim))
        self.mask_patch = nn.Parameter(torch.zeros(patch_samples))

    def positional(self) -> torch.Tensor:
        """(F, C, L, d) sum of the three axis tables."""
        return self.pos_f[:, None, None] + self.pos_c[None, :, None] + self.pos_l[None, None, :]

    def forward(self, patches: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """(B, F, C, L, w) patches -> (B, N, d) embeddings in (f, c, l) order."""
        if tuple(patches.shape[-4:]) != self.grid_shape + (self.patch_samples,):
            raise DimensionError(
                f"expected patches (..., {self.grid_shape}, {self.patch_samples}), got {tuple(patches.shape)}")
        if mask is not None:
            patches = torch.where(mask[..., None], self.mask_patch.to(patches.dtype), patches)
        e = self.proj(patches) + self.positional()
        return e.reshape(e.shape[:-4] + (-1, self.dim))


def embed(grid: PatchGrid, tokenizer: Tokenizer) -> TokenSequence:
    patches = torch.as_tensor(grid.patches, dtype=tokenizer.proj.weight.dtype)
    if patches.shape[-1] != tokenizer.patch_samples:
        raise DimensionError(
            f"patch width {patches.shape[-1]} does not match tokenizer input {tokenizer.patch_samples}")
    return TokenSequence(tokenizer(patches), tuple(grid.shape[:3]))


@dataclass(frozen=True)
class MaskSpec:
    ratio: float = 0.5
    mode: str = "uniform"  # or "axis"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.ratio <= 1:
            raise InvalidParameterError(f"mask ratio must be in [0, 1], got {self.ratio}")
        if self.mode not in ("uniform", "axis"):
            raise InvalidParameterError(f"unknown mask mode {self.mode!r}")


@dataclass
class MaskResult:
    corrupted: PatchGrid
    mask: np.ndarray  # bool (F, C, L)


def sample_mask(grid_shape: tuple[int, int, int], ratio: float, mode: str,
                rng: np.random.Generator) -> np.ndarray:
    """Boolean (F, C, L) mask.

    ``uniform`` masks exactly round(ratio*N) tokens. ``axis`` masks whole
    band, channel or time slices until at least that many are covered, so it
    overshoots by less than one slice.
    """
    F, C, L = grid_shape
    n = F * C * L
    target = int(round(ratio * n))
    mask = np.zeros(n, dtype=bool)
    if mode == "uniform":
        mask[rng.choice(n, size=target, replace=False)] = True
        return mask.reshape(grid_shape)
    mask = mask.reshape(grid_shape)
    while mask.sum() < target:
        axis = int(rng.integers(3))
        idx = int(rng.integers(grid_shape[axis]))
        sl = [slice(None)] * 3
        sl[axis] = idx
        mask[tuple(sl)] = True
    return mask


def apply_mask(grid: PatchGrid, spec: MaskSpec, mask_value: np.ndarray | None = None) -> MaskResult:
    """Replace masked patches with ``mask_value`` (zeros when not given)."""
    F, C, L, w = grid.shape
    mask = sample_mask((F, C, L), spec.ratio, spec.mode, np.random.default_rng(spec.seed))
    fill = np.zeros(w) if mask_value is None else np.asarray(mask_value, dtype=grid.patches.dtype)
    corrupted = np.where(mask[..., None], fill, grid.patches)
    return MaskResult(PatchGrid(corrupted, grid.fs), mask)


def batch_masks(batch: int, grid_shape: tuple[int, int, int], ratio: float, mode: str,
                rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample_mask(grid_shape, ratio, mode, rng) for _ in range(batch)])
