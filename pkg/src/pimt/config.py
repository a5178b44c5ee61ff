"""Experiment configuration: one nested JSON document, validated before any work starts."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import SPLIT_MODES, SyntheticTaskSpec, TaskClass
from .encoder import EncoderConfig
from .errors import ConfigurationError
from .heads import FinetuneConfig
from .model import BackboneConfig
from .pipeline import SignalConfig
from .pretrain import OBJECTIVES, LossWeights, PretrainConfig
from .sigproc import FilterBank, default_filter_bank


@dataclass
class SignalSection:
    mains_hz: list[float] = field(default_factory=lambda: [50.0, 60.0])
    target_fs: float = 200.0
    window_s: float = 4.0
    bands: list[list] | None = None  # [[name, lo, hi], ...]; None selects the 12-band default

    def signal(self) -> SignalConfig:
        return SignalConfig(tuple(self.mains_hz), self.target_fs, self.window_s)

    def bank(self) -> FilterBank:
        return default_filter_bank() if self.bands is None else FilterBank.from_list(self.bands)


@dataclass
class TaskSection:
    kind: str = "classification"
    classes: list[dict] = field(default_factory=lambda: [
        {"label": "alpha", "band": 2, "power_ratio": 4.0}, {"label": "beta", "band": 3, "power_ratio": 4.0}])
    noise_floor: float = 0.1
    gaze_gain: float = 1.0
    gaze_range_deg: float = 15.0
    bursts: bool = True
    subjects: int = 5
    sessions: int = 2
    windows_per_session: int = 20

    def spec(self, n_channels: int, fs: float, window_s: float) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(self.kind, [TaskClass(c["label"], int(c["band"]), float(c["power_ratio"]))
                                             for c in self.classes],
                                 self.noise_floor, n_channels, fs, window_s, gaze_gain=self.gaze_gain,
                                 gaze_range_deg=self.gaze_range_deg, bursts=self.bursts)


@dataclass
class DataSection:
    dir: str | None = None  # dataset directory holding manifest.json
    subjects: int = 30
    sessions: int = 2
    duration_s: float = 120.0
    n_channels: int = 4
    fs: float = 200.0
    noise_floor: float = 0.1
    task: TaskSection = field(default_factory=TaskSection)


@dataclass
class ModelSection:
    patch_s: float = 0.5
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seed: int = 0


@dataclass
class PretrainSection:
    params: PretrainConfig = field(default_factory=PretrainConfig)
    objectives: list[str] = field(default_factory=lambda: list(OBJECTIVES))
    loss_weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class SplitSection:
    mode: str = "within-session"
    test_frac: float = 0.2
    target_subject: str | None = None


@dataclass
class AnalysisSection:
    presets: list[str] = field(default_factory=lambda: ["1-band", "2-band", "4-band", "12-band"])
    patch_sizes_s: list[float] = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0])
    fractions: list[float] = field(default_factory=lambda: [0.25, 0.5, 1.0])
    downstream: bool = False  # fine-tune after each objective/scale pre-training run


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str | None = None
    signal: SignalSection = field(default_factory=SignalSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    split: SplitSection = field(default_factory=SplitSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        bank = self.signal.bank()
        spec = self.data.task.spec(self.data.n_channels, self.signal.target_fs, self.signal.window_s)
        if self.data.task.kind == "classification":
            for c in spec.classes:
                if c.band >= len(bank):
                    raise ConfigurationError(f"task class {c.label!r} uses band {c.band} but the bank has "
                                             f"{len(bank)} bands")
        if self.split.mode not in SPLIT_MODES:
            raise ConfigurationError(f"unknown split mode {self.split.mode!r}")
        if not 0 < self.split.test_frac < 1:
            raise ConfigurationError("split.test_frac must lie in (0, 1)")
        if min(self.data.subjects, self.data.sessions, self.data.task.subjects, self.data.task.sessions,
               self.data.task.windows_per_session) < 1 or self.data.duration_s < self.signal.window_s:
            raise ConfigurationError("dataset sizes must be positive and recordings at least one window long")
        self.backbone_config()

    def backbone_config(self) -> BackboneConfig:
        sig = self.signal.signal()
        w = self.model.patch_s * sig.target_fs
        if abs(w - round(w)) > 1e-9:
            raise ConfigurationError(f"patch of {self.model.patch_s} s is not a whole number of samples")
        return BackboneConfig(len(self.signal.bank()), self.data.n_channels, sig.window_samples, int(round(w)),
                              self.model.encoder, self.model.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """sha256 over everything except the output location."""
        doc = self.to_dict()
        doc.pop("out")
        return canonical_hash(doc)

    def architecture_hash(self) -> str:
        """Hash of the settings that fix tensor shapes and meaning (seeds excluded)."""
        bcfg = self.backbone_config()
        shape = dataclasses.replace(bcfg, seed=0, encoder=dataclasses.replace(bcfg.encoder, seed=0))
        return canonical_hash({"signal": dataclasses.asdict(self.signal), "backbone": shape.to_dict()})

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _build(cls, doc, "config")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({**self.to_dict(), "config_hash": self.hash()}, indent=2, sort_keys=True))

    def override(self, updates: dict) -> "ExperimentConfig":
        """Apply dotted-key updates, e.g. ``{"pretrain.params.epochs": 2}``."""
        doc = self.to_dict()
        for key, value in updates.items():
            node = doc
            *parents, leaf = key.split(".")
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigurationError(f"unknown config key {key!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigurationError(f"unknown config key {key!r}")
            node[leaf] = value
        return ExperimentConfig.from_dict(doc)


def canonical_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _unwrap_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


_SCALARS = (int, float, bool, str)


def _scalar_ok(tp, value) -> bool:
    if tp is bool:
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    if tp is float:
        return isinstance(value, (int, float))
    return isinstance(value, tp)


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{where}: expected an object, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    doc = {k: v for k, v in doc.items() if not (cls is ExperimentConfig and k == "config_hash")}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in doc.items():
        tp = _unwrap_optional(hints[name])
        if dataclasses.is_dataclass(tp) and value is not None:
            kwargs[name] = _build(tp, value, f"{where}.{name}")
        elif tp is tuple or typing.get_origin(tp) is tuple:
            kwargs[name] = tuple(value)
        elif tp in _SCALARS and value is not None:
            if not _scalar_ok(tp, value):
                raise ConfigurationError(f"{where}.{name}: expected {tp.__name__}, got {value!r}")
            kwargs[name] = float(value) if tp is float else value
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc
