"""Glue from raw recordings to model-ready window arrays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sigproc import FilterBank, Recording, decompose, default_filter_bank, preprocess, window_array


@dataclass(frozen=True)
class SignalConfig:
    mains_hz: tuple[float, ...] = (50.0, 60.0)
    target_fs: float = 200.0
    window_s: float = 4.0

    @property
    def window_samples(self) -> int:
        return int(round(self.window_s * self.target_fs))


def prepare_windows(rec: Recording, bank: FilterBank | None = None,
                    sig: SignalConfig = SignalConfig()) -> np.ndarray:
    """Preprocess, decompose and window one recording -> float32 (n_windows, F, C, T)."""
    bank = bank or default_filter_bank()
    clean = preprocess(rec, sig.mains_hz, sig.target_fs)
    return window_array(decompose(clean, bank), sig.window_s).astype(np.float32)


def prepare_many(recs: Sequence[Recording], bank: FilterBank | None = None,
                 sig: SignalConfig = SignalConfig()) -> list[np.ndarray]:
    return [prepare_windows(r, bank, sig) for r in recs]
