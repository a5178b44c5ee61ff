"""Band-token saliency and the ablation / data-scale study harnesses.

Every study returns plain row dicts so the results can go straight to CSV
via :func:`write_table`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .datagen import TaskData
from .errors import ConfigurationError, InvalidParameterError, PatchSizeError
from .heads import FinetuneConfig, FinetuneModel, run_finetune_seeds
from .model import Backbone, BackboneConfig, build_backbone
from .pipeline import SignalConfig, prepare_windows
from .pretrain import OBJECTIVES, LossWeights, PretrainConfig, run_pretrain, split_indices
from .sigproc import FilterBank, default_filter_bank
from .tokenization import patchify

# ---------------------------------------------------------------- saliency


@dataclass
class SaliencyMap:
    mass: np.ndarray  # (F,), nonnegative, sums to 1
    attribution: np.ndarray | None = None  # (F, C, L) raw grad x input magnitudes
    band_names: list[str] | None = None

    def rows(self) -> list[dict]:
        names = self.band_names or [str(f) for f in range(len(self.mass))]
        return [{"band": n, "mass": float(m)} for n, m in zip(names, self.mass)]


def _normalize_mass(per_band: np.ndarray) -> np.ndarray:
    total = per_band.sum()
    if not np.isfinite(total) or total <= np.finfo(np.float64).tiny:
        return np.full(per_band.shape, 1.0 / per_band.size)
    return per_band / total


def attributions(model: FinetuneModel, windows: np.ndarray) -> np.ndarray:
    """Gradient x input magnitude per token for a batch (n, F, C, T) -> (n, F, C, L)."""
    model.eval()
    w = model.backbone.cfg.patch_samples
    patches = patchify(torch.as_tensor(np.asarray(windows), dtype=torch.float32), w)
    with torch.enable_grad():
        e = model.embed(patches).detach().requires_grad_(True)
        model.score(e).sum().backward()
    attr = (e.grad.abs() * e.detach().abs()).sum(-1)
    return attr.reshape((len(patches),) + model.grid_shape).double().numpy()


def saliency(model: FinetuneModel, window: np.ndarray, band_names: Sequence[str] | None = None) -> SaliencyMap:
    """Per-band share of attribution for one window (F, C, T).

    Zero or non-finite gradients give the uniform map.
    """
    attr = attributions(model, np.asarray(window)[None])[0]
    mass = _normalize_mass(attr.mean(axis=(1, 2)))
    return SaliencyMap(mass, attr, list(band_names) if band_names else None)


def mean_saliency(model: FinetuneModel, windows: np.ndarray, band_names: Sequence[str] | None = None,
                  batch_size: int = 32) -> SaliencyMap:
    """Average of the per-window maps (each normalized first)."""
    maps = []
    for s in range(0, len(windows), batch_size):
        attr = attributions(model, windows[s:s + batch_size])
        maps.extend(_normalize_mass(a.mean(axis=(1, 2))) for a in attr)
    return SaliencyMap(np.mean(maps, axis=0), None, list(band_names) if band_names else None)


# ---------------------------------------------------------------- data plumbing


@dataclass
class LabeledWindows:
    x: np.ndarray  # (n, F, C, T)
    y: np.ndarray
    kind: str = "classification"

    def __len__(self) -> int:
        return len(self.x)

    def take(self, idx) -> "LabeledWindows":
        return LabeledWindows(self.x[idx], self.y[idx], self.kind)

    def split(self, test_frac: float = 0.2, seed: int = 0) -> tuple["LabeledWindows", "LabeledWindows"]:
        train, test = split_indices(len(self), test_frac, seed)
        return self.take(train), self.take(test)


def task_windows(data: TaskData | Sequence[TaskData], bank: FilterBank | None = None,
                 sig: SignalConfig | None = None) -> LabeledWindows:
    """Decompose labeled task recordings through ``bank``."""
    items = [data] if isinstance(data, TaskData) else list(data)
    sig = sig or SignalConfig(window_s=items[0].spec.window_s)
    xs, ys = [], []
    for d in items:
        x = prepare_windows(d.recording, bank, sig)
        xs.append(x)
        ys.append(np.asarray(d.labels)[:len(x)])
    return LabeledWindows(np.concatenate(xs), np.concatenate(ys), items[0].spec.kind)


def downstream(backbone_for_seed: Callable[[int], Backbone], train: LabeledWindows, test: LabeledWindows,
               cfg: FinetuneConfig | None = None, seeds: Sequence[int] = (0, 1, 2)) -> dict:
    _, summary = run_finetune_seeds(backbone_for_seed, train.x, train.y, test.x, test.y,
                                    train.kind, cfg, seeds)
    return summary


def _metric_columns(summary: dict) -> dict:
    return {"metric": summary["metric"], "mean": summary["mean"], "std": summary["std"],
            "values": " ".join(f"{v:.6f}" for v in summary["values"])}


# ---------------------------------------------------------------- band presets


@dataclass(frozen=True)
class BandPreset:
    name: str
    bank: FilterBank

    @property
    def n_bands(self) -> int:
        return len(self.bank)


def band_presets() -> dict[str, BandPreset]:
    return {
        "1-band": BandPreset("1-band", FilterBank.from_list([["0.1-75", 0.1, 75.0]])),
        "2-band": BandPreset("2-band", FilterBank.from_list([["0.1-15", 0.1, 15.0], ["15-75", 15.0, 75.0]])),
        "4-band": BandPreset("4-band", FilterBank.from_list(
            [["0.1-5", 0.1, 5.0], ["5-15", 5.0, 15.0], ["15-35", 15.0, 35.0], ["35-75", 35.0, 75.0]])),
        "12-band": BandPreset("12-band", default_filter_bank()),
    }


def _scratch(cfg: BackboneConfig) -> Callable[[int], Backbone]:
    return lambda seed: build_backbone(replace(cfg, seed=seed))


def ablate_bands(data: TaskData | Sequence[TaskData], backbone_cfg: BackboneConfig,
                 finetune_cfg: FinetuneConfig | None = None, presets: Sequence[str] | None = None,
                 seeds: Sequence[int] = (0, 1, 2), test_frac: float = 0.2, split_seed: int = 0,
                 sig: SignalConfig | None = None) -> list[dict]:
    """Fine-tune a freshly initialized model per preset on the same window split."""
    table = band_presets()
    presets = list(presets or table)
    unknown = [p for p in presets if p not in table]
    if unknown:
        raise ConfigurationError(f"unknown band presets {unknown}; choose from {list(table)}")
    rows = []
    for name in presets:
        preset = table[name]
        lw = task_windows(data, preset.bank, sig)
        train, test = lw.split(test_frac, split_seed)
        cfg = replace(backbone_cfg, n_bands=preset.n_bands, n_channels=lw.x.shape[2],
                      window_samples=lw.x.shape[3])
        summary = downstream(_scratch(cfg), train, test, finetune_cfg, seeds)
        rows.append({"preset": name, "n_bands": preset.n_bands, "n_tokens": cfg.n_tokens,
                     **_metric_columns(summary)})
    return rows


def ablate_patch(data: TaskData | Sequence[TaskData], backbone_cfg: BackboneConfig,
                 finetune_cfg: FinetuneConfig | None = None, sizes_s: Sequence[float] = (0.25, 0.5, 1.0, 2.0),
                 seeds: Sequence[int] = (0, 1, 2), test_frac: float = 0.2, split_seed: int = 0,
                 sig: SignalConfig | None = None, bank: FilterBank | None = None) -> list[dict]:
    lw = task_windows(data, bank, sig)
    fs = (sig or SignalConfig()).target_fs
    T = lw.x.shape[3]
    widths = []
    for size in sizes_s:
        w = size * fs
        if abs(w - round(w)) > 1e-9 or round(w) <= 0 or T % round(w):
            raise PatchSizeError(f"patch of {size} s ({w:g} samples) does not tile a {T}-sample window")
        widths.append(int(round(w)))
    train, test = lw.split(test_frac, split_seed)
    rows = []
    for size, w in zip(sizes_s, widths):
        cfg = replace(backbone_cfg, n_bands=lw.x.shape[1], n_channels=lw.x.shape[2],
                      window_samples=T, patch_samples=w)
        summary = downstream(_scratch(cfg), train, test, finetune_cfg, seeds)
        rows.append({"patch_s": size, "patch_samples": w, "n_patches": cfg.n_patches,
                     "n_tokens": cfg.n_tokens, **_metric_columns(summary)})
    return rows


# ---------------------------------------------------------------- pre-training studies


def _final_losses(result) -> dict:
    final = result.final("heldout")
    return {k: v for k, v in final.items() if k not in ("epoch", "split")}


def ablate_objectives(train_windows: np.ndarray, heldout_windows: np.ndarray, backbone_cfg: BackboneConfig,
                      pretrain_cfg: PretrainConfig | None = None, weights: LossWeights | None = None,
                      task: tuple[LabeledWindows, LabeledWindows] | None = None,
                      finetune_cfg: FinetuneConfig | None = None, seeds: Sequence[int] = (0, 1, 2)) -> list[dict]:
    """Full objective set plus six leave-one-out runs; optional downstream score per row."""
    variants = [("full", None)] + [(f"without {t}", t) for t in OBJECTIVES]
    rows = []
    for label, omitted in variants:
        objectives = [t for t in OBJECTIVES if t != omitted]
        result = run_pretrain(train_windows, heldout_windows, backbone_cfg, pretrain_cfg, objectives, weights)
        row = {"row": label, "omitted": omitted or "", "reference": omitted is None,
               "objectives": "+".join(objectives)}
        losses = _final_losses(result)
        row.update({f"heldout_{t}": losses.get(t, "") for t in OBJECTIVES})
        row["heldout_total"] = losses["total"]
        if task is not None:
            bb = result.model.backbone
            row.update(_metric_columns(downstream(lambda s: bb, task[0], task[1], finetune_cfg, seeds)))
        rows.append(row)
    return rows


@dataclass
class ScaleStudy:
    curves: list[dict]
    table: list[dict]
    heldout_index: np.ndarray
    train_subsets: dict[float, np.ndarray]
    backbones: dict[float, Backbone] = field(default_factory=dict)


def scale_study(windows: np.ndarray, fractions: Sequence[float], backbone_cfg: BackboneConfig,
                pretrain_cfg: PretrainConfig | None = None, heldout_frac: float = 0.2, seed: int = 0,
                task: tuple[LabeledWindows, LabeledWindows] | None = None,
                finetune_cfg: FinetuneConfig | None = None, seeds: Sequence[int] = (0, 1, 2)) -> ScaleStudy:
    """Pre-train on nested fractions of one training pool, all scored on the same held-out windows."""
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise InvalidParameterError(f"fractions must lie in (0, 1], got {fractions}")
    pool, held = split_indices(len(windows), heldout_frac, seed)
    order = np.random.default_rng([seed, 1]).permutation(pool)
    curves, table, subsets, backbones = [], [], {}, {}
    for f in fractions:
        n = max(1, int(round(f * len(pool))))
        idx = np.sort(order[:n])
        subsets[f] = idx
        result = run_pretrain(windows[idx], windows[held], backbone_cfg, pretrain_cfg)
        backbones[f] = result.model.backbone
        curves.extend({"fraction": f, **r} for r in result.curves)
        row = {"fraction": f, "n_train": n, "n_heldout": len(held),
               "initial_heldout_total": result.initial("heldout")["total"],
               "final_heldout_total": result.final("heldout")["total"]}
        if task is not None:
            bb = result.model.backbone
            row.update(_metric_columns(downstream(lambda s: bb, task[0], task[1], finetune_cfg, seeds)))
        table.append(row)
    return ScaleStudy(curves, table, held, subsets, backbones)


# ---------------------------------------------------------------- output


def write_table(path, rows: Sequence[dict]) -> Path:
    """CSV with the union of row keys, first-seen order; floats written with repr precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for r in rows:
        columns.extend(k for k in r if k not in columns)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
