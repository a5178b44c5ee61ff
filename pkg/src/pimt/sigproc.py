"""Preprocessing and multi-band decomposition of continuous ExG recordings.

The pipeline is notch -> resample -> z-score -> decompose -> window.
Decomposition runs on the continuous recording so that the very slow bands
(ECG-LF spans 0.03-0.12 Hz) are resolvable; windows are cut afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np
from scipy import signal

from .errors import BandUnrealizableError, EmptyOutputError, InvalidParameterError

SAFE_FRACTION = 0.45  # usable passband edge as a fraction of fs
FILTER_ORDER = 4
NORM_EPS = 1e-8


@dataclass
class Recording:
    """A continuous multichannel signal, ``data`` shaped (C, T)."""

    data: np.ndarray
    fs: float
    subject_id: str = "S0"
    session_id: str = "0"
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.fs <= 0:
            raise InvalidParameterError(f"fs must be positive, got {self.fs}")
        if self.data.shape[1] < 1:
            raise InvalidParameterError("recording has no samples")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.data.shape[0])]

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs

    def with_data(self, data: np.ndarray, fs: float | None = None) -> "Recording":
        return replace(self, data=data, fs=self.fs if fs is None else fs,
                       channel_names=list(self.channel_names))


class BandDefinition(NamedTuple):
    name: str
    lo: float
    hi: float


@dataclass(frozen=True)
class FilterBank:
    bands: tuple[BandDefinition, ...]

    def __post_init__(self):
        bands = tuple(BandDefinition(b[0], float(b[1]), float(b[2])) for b in self.bands)
        object.__setattr__(self, "bands", bands)
        if not bands:
            raise InvalidParameterError("filter bank is empty")
        names = [b.name for b in bands]
        if len(set(names)) != len(names):
            raise InvalidParameterError(f"duplicate band names in {names}")
        for b in bands:
            if not 0 <= b.lo < b.hi:
                raise InvalidParameterError(f"band {b.name!r} needs 0 <= lo < hi, got {b.lo}-{b.hi}")

    def __len__(self) -> int:
        return len(self.bands)

    def __getitem__(self, i: int) -> BandDefinition:
        return self.bands[i]

    def __iter__(self):
        return iter(self.bands)

    @property
    def names(self) -> list[str]:
        return [b.name for b in self.bands]

    def to_list(self) -> list[list]:
        return [[b.name, b.lo, b.hi] for b in self.bands]

    @classmethod
    def from_list(cls, items: Sequence[Sequence]) -> "FilterBank":
        return cls(tuple(BandDefinition(str(n), float(lo), float(hi)) for n, lo, hi in items))


_DEFAULT_BANDS = (
    ("EEG-delta", 0.5, 4.0),
    ("EEG-theta", 4.0, 8.0),
    ("EEG-alpha", 8.0, 13.0),
    ("EEG-beta", 13.0, 30.0),
    ("EEG-gamma", 30.0, 100.0),
    ("EMG-LF", 15.0, 45.0),
    ("EMG-MF", 45.0, 95.0),
    ("EMG-HF", 95.0, 100.0),
    ("EOG", 0.1, 20.0),
    ("ECG-LF", 0.03, 0.12),
    ("ECG-HF", 0.12, 0.488),
    ("QRS", 8.0, 50.0),
)


def default_filter_bank() -> FilterBank:
    """The 12 default sub-bands, in canonical order."""
    return FilterBank(tuple(BandDefinition(*b) for b in _DEFAULT_BANDS))


@dataclass
class BandStack:
    """Band-decomposed signal, ``data`` shaped (F, C, T)."""

    data: np.ndarray
    fs: float
    bank: FilterBank

    def __post_init__(self):
        if self.data.ndim != 3:
            raise InvalidParameterError(f"BandStack data must be 3-D, got shape {self.data.shape}")
        if self.data.shape[0] != len(self.bank):
            raise InvalidParameterError(
                f"stack has {self.data.shape[0]} bands but bank has {len(self.bank)}")

    @property
    def n_samples(self) -> int:
        return self.data.shape[-1]


def notch(rec: Recording, mains_hz: float, quality: float = 30.0) -> Recording:
    """Remove a mains line with a zero-phase second-order IIR notch."""
    nyq = rec.fs / 2
    if not 0 < mains_hz < nyq:
        raise InvalidParameterError(f"notch frequency {mains_hz} Hz must lie in (0, {nyq}) Hz")
    b, a = signal.iirnotch(mains_hz, quality, fs=rec.fs)
    if rec.n_samples <= 3 * max(len(a), len(b)):
        raise InvalidParameterError("recording too short to notch-filter")
    return rec.with_data(signal.filtfilt(b, a, rec.data, axis=-1))


def resample(rec: Recording, target_fs: float = 200.0) -> Recording:
    """Polyphase resampling with anti-aliasing; output length is round(T * target / fs)."""
    if target_fs <= 0:
        raise InvalidParameterError(f"target_fs must be positive, got {target_fs}")
    if target_fs == rec.fs:
        return rec.with_data(rec.data.copy())
    ratio = Fraction(target_fs / rec.fs).limit_denominator(10_000)
    y = signal.resample_poly(rec.data, ratio.numerator, ratio.denominator, axis=-1)
    n_out = int(round(rec.n_samples * target_fs / rec.fs))
    if y.shape[-1] >= n_out:
        y = y[:, :n_out]
    else:
        y = np.pad(y, ((0, 0), (0, n_out - y.shape[-1])), mode="edge")
    return rec.with_data(y, fs=target_fs)


def zscore_normalize(rec: Recording) -> Recording:
    """Per-channel z-score over the whole recording; constant channels map to zero."""
    x = rec.data
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    return rec.with_data((x - mean) / np.where(std > NORM_EPS, std, 1.0))


def preprocess(rec: Recording, mains_hz: Sequence[float] = (50.0, 60.0),
               target_fs: float = 200.0) -> Recording:
    for f0 in mains_hz:
        if f0 < rec.fs / 2:
            rec = notch(rec, f0)
    rec = resample(rec, target_fs)
    out = zscore_normalize(rec)
    if not np.all(np.isfinite(out.data)):
        raise InvalidParameterError("non-finite values after preprocessing")
    return out


def realize_band(band: BandDefinition, fs: float) -> tuple[float, float]:
    """Return the passband actually used for ``band`` at sampling rate ``fs``.

    The upper edge is capped at 0.45*fs. A band lying wholly above the cap
    (but below Nyquist) keeps its bandwidth and is shifted down against the
    cap, so EMG-HF (95-100 Hz) becomes 85-90 Hz at 200 Hz.
    """
    cap = SAFE_FRACTION * fs
    if band.lo >= fs / 2:
        raise BandUnrealizableError(band.name, f"lower edge {band.lo} Hz is at or above Nyquist ({fs / 2} Hz)")
    if band.hi <= cap:
        return band.lo, band.hi
    if band.lo < cap:
        return band.lo, cap
    lo = cap - (band.hi - band.lo)
    if lo <= 0:
        raise BandUnrealizableError(band.name, f"cannot fit below {cap} Hz")
    return lo, cap


def band_sos(band: BandDefinition, fs: float, order: int = FILTER_ORDER) -> np.ndarray:
    lo, hi = realize_band(band, fs)
    if lo <= 0:
        return signal.butter(order, hi, btype="lowpass", fs=fs, output="sos")
    return signal.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")


def decompose(rec: Recording, bank: FilterBank | None = None) -> BandStack:
    """Zero-phase band-pass the recording through every band of ``bank``."""
    bank = default_filter_bank() if bank is None else bank
    sos_list = [band_sos(b, rec.fs) for b in bank]  # validate every band before filtering
    out = np.empty((len(bank),) + rec.data.shape)
    for f, sos in enumerate(sos_list):
        padlen = min(rec.n_samples - 1, 3 * (2 * len(sos) + 1))
        out[f] = signal.sosfiltfilt(sos, rec.data, axis=-1, padlen=padlen)
    return BandStack(out, rec.fs, bank)


def window(stack: BandStack, win_s: float = 4.0) -> list[BandStack]:
    """Cut non-overlapping windows; the trailing remainder is dropped."""
    n = int(round(win_s * stack.fs))
    if n <= 0:
        raise InvalidParameterError(f"window length must be positive, got {win_s} s")
    count = stack.n_samples // n
    if count == 0:
        raise EmptyOutputError(
            f"window of {n} samples is longer than the recording ({stack.n_samples} samples)")
    return [BandStack(stack.data[..., i * n:(i + 1) * n], stack.fs, stack.bank) for i in range(count)]


def window_array(stack: BandStack, win_s: float = 4.0) -> np.ndarray:
    """Same as :func:`window` but stacked into an array shaped (n_windows, F, C, n)."""
    wins = window(stack, win_s)
    return np.stack([w.data for w in wins])


def augment_noise(win, sigma_rel: float = 0.05, seed: int = 0):
    """Add Gaussian noise whose std is ``sigma_rel`` times each signal's own std.

    Works on a BandStack or on any array with time on the last axis; every
    leading index (band, channel) is treated as its own signal.
    """
    if sigma_rel < 0:
        raise InvalidParameterError(f"sigma_rel must be >= 0, got {sigma_rel}")
    data = win.data if isinstance(win, BandStack) else np.asarray(win)
    if sigma_rel == 0:
        out = data.copy()
    else:
        rng = np.random.default_rng(seed)
        std = data.std(axis=-1, keepdims=True)
        out = data + rng.standard_normal(data.shape) * (sigma_rel * std)
    if isinstance(win, BandStack):
        return BandStack(out, win.fs, win.bank)
    return out
