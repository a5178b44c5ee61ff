"""Synthetic ExG with known band-localized structure, the on-disk container, and dataset splits.

Every generator draws band-limited Gaussian processes directly in the
frequency domain (flat spectrum inside the band, zero outside), so the
expected power inside any frequency interval is known in closed form. The
oracle decoders below rely on that.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InvalidParameterError, SplitInfeasibleError
from .sigproc import Recording, default_filter_bank, realize_band

# Per-band background amplitude (std of the band process), default-bank order.
BACKGROUND_AMPLITUDE = np.array([1.0, 0.7, 0.6, 0.5, 0.3, 0.4, 0.3, 0.2, 0.8, 0.5, 0.5, 0.4])
BURST_RATE_HZ = 0.02  # per channel
BURST_GAIN = 5.0
GAZE_FREQS_HZ = (0.5, 0.75)


def _band_process(n: int, fs: float, lo: float, hi: float, rng: np.random.Generator,
                  n_channels: int = 1) -> np.ndarray:
    """Unit-variance Gaussian noise with a flat spectrum on [lo, hi] Hz, shaped (n_channels, n)."""
    freqs = np.fft.rfftfreq(n, 1 / fs)
    inband = (freqs >= lo) & (freqs <= hi)
    if not inband.any():
        inband[np.argmin(np.abs(freqs - 0.5 * (lo + hi)))] = True
    spec = (rng.standard_normal((n_channels, freqs.size)) + 1j * rng.standard_normal((n_channels, freqs.size)))
    spec *= inband
    x = np.fft.irfft(spec, n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _realized_bands(fs: float) -> list[tuple[float, float]]:
    return [realize_band(b, fs) for b in default_filter_bank()]


def _add_bursts(x: np.ndarray, fs: float, rng: np.random.Generator) -> None:
    """EMG-like transients: 20-90 Hz noise under a Hann envelope, 100-300 ms long."""
    C, T = x.shape
    std = x.std(axis=-1)
    for c in range(C):
        for _ in range(rng.poisson(BURST_RATE_HZ * T / fs)):
            length = int(rng.uniform(0.1, 0.3) * fs)
            if length >= T:
                continue
            start = int(rng.integers(0, T - length))
            burst = _band_process(length, fs, 20.0, min(90.0, 0.45 * fs), rng)[0]
            x[c, start:start + length] += BURST_GAIN * std[c] * burst * np.hanning(length)


def _background(T: int, C: int, fs: float, rng: np.random.Generator, noise_floor: float,
                bursts: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Sum of per-band processes with random per-channel gains; returns (signal, gains (12, C))."""
    gains = BACKGROUND_AMPLITUDE[:, None] * np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=(12, C)))
    x = np.zeros((C, T))
    for b, (lo, hi) in enumerate(_realized_bands(fs)):
        x += gains[b][:, None] * _band_process(T, fs, lo, hi, rng, C)
    x += noise_floor * rng.standard_normal((C, T))
    if bursts:
        _add_bursts(x, fs, rng)
    return x, gains


def synth_freeliving(duration_s: float, n_channels: int = 4, fs: float = 200.0, seed: int = 0,
                     subject_id: str = "S0", session_id: str = "0", noise_floor: float = 0.1,
                     min_window_s: float = 4.0) -> Recording:
    """Unlabeled free-living proxy: all 12 band processes, bursts and white noise."""
    T = int(round(duration_s * fs))
    if T < min_window_s * fs:
        raise InvalidParameterError(f"{duration_s} s is shorter than one {min_window_s} s window")
    rng = np.random.default_rng(seed)
    x, _ = _background(T, n_channels, fs, rng, noise_floor)
    return Recording(x, fs, subject_id, session_id)


@dataclass
class TaskClass:
    label: str
    band: int
    power_ratio: float


@dataclass
class SyntheticTaskSpec:
    kind: str = "classification"  # or "gaze"
    classes: list[TaskClass] = field(default_factory=lambda: [TaskClass("alpha", 2, 4.0),
                                                              TaskClass("beta", 3, 4.0)])
    noise_floor: float = 0.1
    n_channels: int = 4
    fs: float = 200.0
    window_s: float = 4.0
    gaze_channels: tuple[int, int] = (0, 1)
    gaze_gain: float = 1.0  # signal amplitude per degree
    gaze_range_deg: float = 15.0
    bursts: bool = True

    def __post_init__(self):
        self.classes = [c if isinstance(c, TaskClass) else TaskClass(**c) for c in self.classes]
        self.gaze_channels = tuple(self.gaze_channels)
        if self.kind not in ("classification", "gaze"):
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        if self.kind == "classification":
            if len(self.classes) < 2:
                raise ConfigurationError("a classification task needs at least two classes")
            n_bands = len(default_filter_bank())
            for c in self.classes:
                if not 0 <= c.band < n_bands:
                    raise ConfigurationError(f"class {c.label!r}: band index {c.band} outside 0..{n_bands - 1}")
                if c.power_ratio < 1:
                    raise ConfigurationError(f"class {c.label!r}: power ratio must be >= 1")
        elif max(self.gaze_channels) >= self.n_channels:
            raise ConfigurationError("gaze channels must index existing channels")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_s * self.fs))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskData:
    """A continuous labeled recording made of consecutive windows.

    ``labels`` has one entry per window: class indices (int) for
    classification, (horizontal, vertical) degrees for gaze.
    """

    recording: Recording
    labels: np.ndarray
    spec: SyntheticTaskSpec
    band_baseline: np.ndarray  # expected band power per (class band, channel) without signature

    def raw_windows(self) -> np.ndarray:
        n = self.spec.window_samples
        k = len(self.labels)
        return self.recording.data[:, :k * n].reshape(self.recording.n_channels, k, n).transpose(1, 0, 2)


def _expected_band_power(gains: np.ndarray, fs: float, lo: float, hi: float, noise_floor: float) -> np.ndarray:
    """Expected one-sided power inside [lo, hi] for each channel, given background gains (12, C)."""
    total = np.zeros(gains.shape[1])
    for b, (blo, bhi) in enumerate(_realized_bands(fs)):
        overlap = max(0.0, min(hi, bhi) - max(lo, blo))
        total += gains[b] ** 2 * overlap / (bhi - blo)
    return total + noise_floor ** 2 * (hi - lo) / (fs / 2)


def synth_task(spec: SyntheticTaskSpec, n_windows: int, seed: int = 0, subject_id: str = "S0",
               session_id: str = "0") -> TaskData:
    n_classes = len(spec.classes)
    if spec.kind == "classification" and n_windows < 2 * n_classes:
        raise InvalidParameterError(f"need at least {2 * n_classes} windows, got {n_windows}")
    rng = np.random.default_rng(seed)
    n = spec.window_samples
    T = n * n_windows
    C = spec.n_channels
    x, gains = _background(T, C, spec.fs, rng, spec.noise_floor, spec.bursts)
    bands = _realized_bands(spec.fs)

    if spec.kind == "classification":
        labels = rng.permutation(np.arange(n_windows) % n_classes)
        baseline = np.stack([_expected_band_power(gains, spec.fs, *bands[c.band], spec.noise_floor)
                             for c in spec.classes])
        for k, cls in enumerate(spec.classes):
            if cls.power_ratio == 1:
                continue
            extra = np.sqrt((cls.power_ratio - 1) * baseline[k])[:, None]
            proc = extra * _band_process(T, spec.fs, *bands[cls.band], rng, C)
            gate = np.repeat(labels == k, n)[None, :]
            x += proc * gate
        return TaskData(Recording(x, spec.fs, subject_id, session_id), labels, spec, baseline)

    angles = rng.uniform(-spec.gaze_range_deg, spec.gaze_range_deg, size=(n_windows, 2))
    t = np.arange(n) / spec.fs
    for axis, (ch, f0) in enumerate(zip(spec.gaze_channels, GAZE_FREQS_HZ)):
        wave = np.sin(2 * np.pi * f0 * t)
        x[ch] += spec.gaze_gain * (angles[:, axis:axis + 1] * wave).ravel()
    return TaskData(Recording(x, spec.fs, subject_id, session_id), angles, spec, np.zeros((0, C)))


def oracle_band_classifier(data: TaskData) -> np.ndarray:
    """Predict the class whose signature band shows the largest power relative to its known baseline."""
    spec = data.spec
    wins = data.raw_windows()
    n = wins.shape[-1]
    freqs = np.fft.rfftfreq(n, 1 / spec.fs)
    spec_pow = np.abs(np.fft.rfft(wins, axis=-1)) ** 2
    bands = _realized_bands(spec.fs)
    scores = []
    for k, cls in enumerate(spec.classes):
        lo, hi = bands[cls.band]
        sel = (freqs >= lo) & (freqs <= hi)
        # Parseval: one-sided power from rFFT bins is 2|X|^2 / n^2
        p = 2 * spec_pow[..., sel].sum(-1) / n ** 2
        scores.append(np.log(p / data.band_baseline[k]).mean(-1))
    return np.argmax(np.stack(scores, axis=-1), axis=-1)


def oracle_gaze_decoder(data: TaskData) -> np.ndarray:
    """Least-squares amplitude of the two slow gaze sinusoids, converted back to degrees."""
    spec = data.spec
    wins = data.raw_windows()
    t = np.arange(wins.shape[-1]) / spec.fs
    out = np.empty((len(wins), 2))
    for axis, (ch, f0) in enumerate(zip(spec.gaze_channels, GAZE_FREQS_HZ)):
        basis = np.stack([np.sin(2 * np.pi * f0 * t), np.cos(2 * np.pi * f0 * t), np.ones_like(t)], axis=1)
        coef, *_ = np.linalg.lstsq(basis, wins[:, ch].T, rcond=None)
        out[:, axis] = coef[0] / spec.gaze_gain
    return out


# --- on-disk container -------------------------------------------------------

def write_recording(directory, name: str, rec: Recording) -> Path:
    """Write ``name.f32`` (little-endian float32, row-major C x T) and ``name.json`` metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{name}.f32"
    rec.data.astype("<f4").tofile(path)
    meta = {"fs": rec.fs, "n_channels": rec.n_channels, "n_samples": rec.n_samples,
            "subject_id": rec.subject_id, "session_id": rec.session_id,
            "channel_names": list(rec.channel_names)}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def read_recording(path) -> Recording:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.fromfile(path, dtype="<f4")
    C, T = meta["n_channels"], meta["n_samples"]
    if data.size != C * T:
        raise InvalidParameterError(f"{path}: expected {C}x{T} samples, found {data.size}")
    return Recording(data.reshape(C, T).astype(np.float64), meta["fs"], meta["subject_id"],
                     meta["session_id"], meta["channel_names"])


@dataclass
class ManifestEntry:
    path: str
    subject_id: str
    session_id: str
    kind: str  # "freeliving" or "task"
    n_windows: int
    labels: list | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")
    task: dict | None = None

    def __post_init__(self):
        for e in self.entries:
            if e.labels is not None and len(e.labels) != e.n_windows:
                raise InvalidParameterError(f"{e.path}: {len(e.labels)} labels for {e.n_windows} windows")

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def select(self, kind: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.kind == kind], self.root, self.task)

    @property
    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.entries})

    def save(self, path) -> None:
        path = Path(path)
        doc = {"version": 1, "task": self.task, "entries": [asdict(e) for e in self.entries]}
        path.write_text(json.dumps(doc, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        doc = json.loads(path.read_text())
        m = cls([ManifestEntry(**e) for e in doc["entries"]], path.parent, doc.get("task"))
        for e in m.entries:
            if not m.resolve(e).is_file():
                raise FileNotFoundError(f"manifest lists missing recording {m.resolve(e)}")
        return m


# --- splits ------------------------------------------------------------------

SPLIT_MODES = ("within-session", "cross-session", "cross-subject", "loso")


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "within-session"
    seed: int = 0
    test_frac: float = 0.2
    target_subject: str | None = None  # LOSO only; drawn from the seed when None

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ConfigurationError(f"unknown split mode {self.mode!r}; choose from {SPLIT_MODES}")


@dataclass(frozen=True)
class WindowRef:
    entry: int
    window: int


@dataclass
class Split:
    train: list[WindowRef]
    test: list[WindowRef]
    pretrain_allow: list[str]  # subjects whose free-living data may be used for pre-training
    test_subjects: list[str] = field(default_factory=list)


def _refs(entries: Sequence[ManifestEntry], which: Sequence[int]) -> list[WindowRef]:
    return [WindowRef(i, w) for i in which for w in range(entries[i].n_windows)]


def make_splits(manifest: DatasetManifest, spec: SplitSpec) -> Split:
    """Split the labeled windows of ``manifest`` at the granularity named by ``spec.mode``."""
    entries = manifest.entries
    rng = np.random.default_rng(spec.seed)
    subjects = sorted({e.subject_id for e in entries})
    if spec.mode == "within-session":
        train, test = [], []
        for i, e in enumerate(entries):
            perm = rng.permutation(e.n_windows)
            n_test = int(round(spec.test_frac * e.n_windows))
            test += [WindowRef(i, int(w)) for w in sorted(perm[:n_test])]
            train += [WindowRef(i, int(w)) for w in sorted(perm[n_test:])]
        return Split(train, test, subjects)

    if spec.mode == "cross-session":
        sessions: dict[str, list[str]] = {}
        for e in entries:
            sessions.setdefault(e.subject_id, [])
            if e.session_id not in sessions[e.subject_id]:
                sessions[e.subject_id].append(e.session_id)
        multi = {s: sorted(v) for s, v in sessions.items() if len(v) >= 2}
        if not multi:
            raise SplitInfeasibleError("cross-session split needs a subject with at least two sessions")
        held = {(s, str(rng.choice(v))) for s, v in sorted(multi.items())}
        test_idx = [i for i, e in enumerate(entries) if (e.subject_id, e.session_id) in held]
        train_idx = [i for i, e in enumerate(entries) if (e.subject_id, e.session_id) not in held]
        return Split(_refs(entries, train_idx), _refs(entries, test_idx), subjects)

    if len(subjects) < 2:
        raise SplitInfeasibleError(f"{spec.mode} split needs at least two subjects, got {len(subjects)}")
    if spec.mode == "loso":
        target = spec.target_subject or str(rng.choice(subjects))
        if target not in subjects:
            raise SplitInfeasibleError(f"LOSO target {target!r} not in manifest")
        held_subjects = [target]
    else:
        n_test = min(len(subjects) - 1, max(1, int(round(spec.test_frac * len(subjects)))))
        held_subjects = sorted(rng.choice(subjects, size=n_test, replace=False).tolist())
    test_idx = [i for i, e in enumerate(entries) if e.subject_id in held_subjects]
    train_idx = [i for i, e in enumerate(entries) if e.subject_id not in held_subjects]
    allow = subjects if spec.mode == "cross-subject" else [s for s in subjects if s not in held_subjects]
    return Split(_refs(entries, train_idx), _refs(entries, test_idx), allow, held_subjects)
