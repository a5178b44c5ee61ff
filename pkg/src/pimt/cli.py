"""Command-line entry point: ``pimt <command> [--config FILE] [--seed N] [--seeds K] [--out DIR]``.

Exit codes: 0 success, 2 invalid input or incompatible artifacts, 3 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis
from .config import ExperimentConfig, canonical_hash
from .datagen import (DatasetManifest, ManifestEntry, SplitSpec, TaskData, make_splits, read_recording,
                      synth_freeliving, synth_task, write_recording)
from .errors import CompatibilityError, PimtError, TrainingDivergenceError
from .heads import FinetuneModel, evaluate, run_finetune, summarize
from .model import backbone_from_checkpoint, build_backbone, load_checkpoint, save_checkpoint
from .pipeline import prepare_windows
from .pretrain import run_pretrain, split_indices

log = logging.getLogger("pimt")

COMMANDS = ("synth", "pretrain", "finetune", "eval", "ablate-bands", "ablate-objectives", "ablate-patch",
            "scale-study", "saliency")
OUT_ROOT_ENV = "PIMT_OUT_ROOT"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


# ---------------------------------------------------------------- shared plumbing


class Run:
    """Resolved configuration, seeds and output directory for one command."""

    def __init__(self, command: str, args: argparse.Namespace):
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.data is not None:
            cfg.data.dir = args.data
        self.cfg = cfg
        self.command = command
        self.hash = cfg.hash()
        self.seeds = [cfg.seed + i for i in range(args.seeds)]
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        self.out = Path(args.out or cfg.out or root / f"{command}-{self.hash[:12]}")
        self.checkpoint = args.checkpoint

    def prepare_out(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg.save(self.out / "config.json")
        return self.out

    def manifest(self) -> DatasetManifest:
        if not self.cfg.data.dir:
            raise FileNotFoundError("no dataset directory: set data.dir in the config or pass --data")
        return DatasetManifest.load(Path(self.cfg.data.dir) / "manifest.json")

    def windows(self, manifest: DatasetManifest, entry: ManifestEntry, bank=None) -> np.ndarray:
        rec = read_recording(manifest.resolve(entry))
        return prepare_windows(rec, bank or self.cfg.signal.bank(), self.cfg.signal.signal())

    def task_spec(self):
        return self.cfg.data.task.spec(self.cfg.data.n_channels, self.cfg.signal.target_fs, self.cfg.signal.window_s)

    def split(self, manifest: DatasetManifest):
        c = self.cfg.split
        return make_splits(manifest.select("task"), SplitSpec(c.mode, self.cfg.seed, c.test_frac, c.target_subject))

    def labeled(self, manifest: DatasetManifest, refs) -> analysis.LabeledWindows:
        tasks = manifest.select("task")
        cache: dict[int, np.ndarray] = {}
        xs, ys = [], []
        for ref in refs:
            if ref.entry not in cache:
                cache[ref.entry] = self.windows(tasks, tasks.entries[ref.entry])
            xs.append(cache[ref.entry][ref.window])
            ys.append(tasks.entries[ref.entry].labels[ref.window])
        kind = self.cfg.data.task.kind
        y = np.asarray(ys, dtype=np.int64 if kind == "classification" else np.float64)
        return analysis.LabeledWindows(np.stack(xs), y, kind)

    def train_test(self, manifest: DatasetManifest):
        split = self.split(manifest)
        return self.labeled(manifest, split.train), self.labeled(manifest, split.test)

    def task_data(self, manifest: DatasetManifest) -> list[TaskData]:
        spec = self.task_spec()
        out = []
        for e in manifest.select("task").entries:
            rec = read_recording(manifest.resolve(e))
            out.append(TaskData(rec, np.asarray(e.labels), spec, np.zeros((0, rec.n_channels))))
        return out

    def pretrain_windows(self, manifest: DatasetManifest) -> np.ndarray:
        allow = set(manifest.subjects)
        if manifest.select("task").entries:
            allow = set(self.split(manifest).pretrain_allow)
        free = [e for e in manifest.select("freeliving").entries if e.subject_id in allow]
        if not free:
            raise FileNotFoundError("manifest holds no free-living recordings for pre-training")
        fl = manifest.select("freeliving")
        return np.concatenate([self.windows(fl, e) for e in free])

    def pretrain_params(self):
        return replace(self.cfg.pretrain.params, seed=self.cfg.pretrain.params.seed + self.cfg.seed)

    def backbone_config(self):
        return replace(self.cfg.backbone_config(), seed=self.cfg.model.seed + self.cfg.seed)

    def check_compatible(self, blob: dict) -> None:
        have = blob["meta"].get("architecture_hash")
        want = self.cfg.architecture_hash()
        if have != want:
            raise CompatibilityError(f"checkpoint architecture {str(have)[:12]} does not match config {want[:12]}")

    def backbone_factory(self):
        if not self.checkpoint:
            bcfg = self.cfg.backbone_config()
            return lambda s: build_backbone(replace(bcfg, seed=bcfg.seed + s))
        blob = load_checkpoint(self.checkpoint)
        self.check_compatible(blob)
        bb = backbone_from_checkpoint(blob)
        return lambda s: bb

    def tag(self, rows: Sequence[dict]) -> list[dict]:
        return [{**r, "config_hash": self.hash} for r in rows]


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _entry_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------- commands


def cmd_synth(run: Run) -> dict:
    cfg, d = run.cfg, run.cfg.data
    out = run.prepare_out()
    entries = []
    for s in range(d.subjects):
        for ses in range(d.sessions):
            rec = synth_freeliving(d.duration_s, d.n_channels, d.fs, _entry_seed(cfg.seed, 0, s, ses),
                                   f"S{s:02d}", str(ses), d.noise_floor)
            path = write_recording(out / "freeliving", f"S{s:02d}_{ses}", rec)
            entries.append(ManifestEntry(str(path.relative_to(out)), rec.subject_id, rec.session_id,
                                         "freeliving", int(d.duration_s // cfg.signal.window_s)))
    t, spec = d.task, run.task_spec()
    spec = replace(spec, fs=d.fs)
    for s in range(t.subjects):
        for ses in range(t.sessions):
            data = synth_task(spec, t.windows_per_session, _entry_seed(cfg.seed, 1, s, ses), f"S{s:02d}", str(ses))
            path = write_recording(out / "task", f"S{s:02d}_{ses}", data.recording)
            entries.append(ManifestEntry(str(path.relative_to(out)), f"S{s:02d}", str(ses), "task",
                                         t.windows_per_session, np.asarray(data.labels).tolist()))
    manifest = DatasetManifest(entries, out, {**spec.to_dict(), "config_hash": run.hash})
    manifest.save(out / "manifest.json")
    digest = canonical_hash(json.loads((out / "manifest.json").read_text()))
    print(f"synth: {d.subjects} subjects x {d.sessions} sessions free-living, "
          f"{t.subjects} x {t.sessions} task recordings -> {out} (manifest {digest[:12]})")
    return {"manifest_hash": digest, "n_entries": len(entries)}


def cmd_pretrain(run: Run) -> dict:
    manifest = run.manifest()
    windows = run.pretrain_windows(manifest)
    params = run.pretrain_params()
    train, held = split_indices(len(windows), params.heldout_frac, params.seed)
    p = run.cfg.pretrain
    bcfg = run.backbone_config()
    out = run.prepare_out()
    result = run_pretrain(windows[train], windows[held], bcfg, params, p.objectives, p.loss_weights)
    meta = {"kind": "pretrain", "backbone": bcfg.to_dict(), "objectives": list(result.model.objectives),
            "config_hash": run.hash, "architecture_hash": run.cfg.architecture_hash()}
    save_checkpoint(out / "checkpoint.pt", {"backbone": result.model.backbone,
                                            "decoders": result.model.decoders}, meta)
    analysis.write_table(out / "curves.csv", run.tag(result.curves))
    final = result.final("heldout") if len(held) else result.final("train")
    print(f"pretrain: {len(train)} train / {len(held)} held-out windows, final total {final['total']:.6f} -> {out}")
    return {"final": final}


def _finetuned_blob_model(blob: dict) -> FinetuneModel:
    meta = blob["meta"]
    model = FinetuneModel(backbone_from_checkpoint(blob), meta["task_kind"], meta["n_classes"])
    model.head.load_state_dict(blob["state"]["head"])
    return model


def cmd_finetune(run: Run) -> dict:
    manifest = run.manifest()
    train, test = run.train_test(manifest)
    factory = run.backbone_factory()
    out = run.prepare_out()
    n_classes = len(run.cfg.data.task.classes) if train.kind == "classification" else None
    results = []
    for s in run.seeds:
        res = run_finetune(factory(s), train.x, train.y, test.x, test.y, train.kind,
                           replace(run.cfg.finetune, seed=run.cfg.finetune.seed + s), n_classes)
        res.report.seed = s
        res.report.config_hash = run.hash
        meta = {"kind": "finetune", "task_kind": train.kind, "n_classes": res.model.n_classes,
                "backbone": res.model.backbone.cfg.to_dict(), "seed": s, "config_hash": run.hash,
                "architecture_hash": run.cfg.architecture_hash(), "test_metric": res.report.primary}
        save_checkpoint(out / f"finetuned_seed{s}.pt", {"backbone": res.model.backbone, "head": res.model.head}, meta)
        results.append(res)
    reports = [r.report for r in results]
    summary = summarize(reports)
    rows = [{"seed": r.seed, summary["metric"]: r.primary} for r in reports]
    analysis.write_table(out / "metrics.csv", run.tag(rows))
    analysis.write_table(out / "summary.csv", run.tag([{"metric": summary["metric"], "mean": summary["mean"],
                                                        "std": summary["std"], "n_seeds": len(reports)}]))
    _write_json(out / "metrics.json", {"reports": [r.to_dict() for r in reports], "summary": summary,
                                       "config_hash": run.hash})
    print(f"finetune: {summary['metric']} {summary['mean']:.4f} +/- {summary['std']:.4f} "
          f"over seeds {run.seeds} -> {out}")
    return summary


def cmd_eval(run: Run) -> dict:
    if not run.checkpoint:
        raise FileNotFoundError("eval needs --checkpoint pointing at a fine-tuned model")
    blob = load_checkpoint(run.checkpoint)
    if blob["meta"].get("kind") != "finetune":
        raise CompatibilityError(f"{run.checkpoint} is not a fine-tuned checkpoint")
    run.check_compatible(blob)
    model = _finetuned_blob_model(blob)
    manifest = run.manifest()
    _, test = run.train_test(manifest)
    report = evaluate(model, test.x, test.y)
    report.seed = blob["meta"]["seed"]
    report.config_hash = run.hash
    out = run.prepare_out()
    doc = {"report": report.to_dict(), "stored_test_metric": blob["meta"]["test_metric"],
           "checkpoint_config_hash": blob["meta"]["config_hash"], "config_hash": run.hash}
    _write_json(out / "eval.json", doc)
    print(f"eval: {report.task} metric {report.primary:.6f} (stored {blob['meta']['test_metric']:.6f}) -> {out}")
    return doc


def cmd_ablate_bands(run: Run) -> list[dict]:
    manifest = run.manifest()
    data = run.task_data(manifest)
    out = run.prepare_out()
    rows = analysis.ablate_bands(data, run.backbone_config(), run.cfg.finetune, run.cfg.analysis.presets,
                                 run.seeds, run.cfg.split.test_frac, run.cfg.seed, run.cfg.signal.signal())
    analysis.write_table(out / "ablate_bands.csv", run.tag(rows))
    for r in rows:
        print(f"{r['preset']:>8}: {r['metric']} {r['mean']:.4f} +/- {r['std']:.4f}")
    return rows


def cmd_ablate_patch(run: Run) -> list[dict]:
    manifest = run.manifest()
    data = run.task_data(manifest)
    out = run.prepare_out()
    rows = analysis.ablate_patch(data, run.backbone_config(), run.cfg.finetune, run.cfg.analysis.patch_sizes_s,
                                 run.seeds, run.cfg.split.test_frac, run.cfg.seed, run.cfg.signal.signal(),
                                 run.cfg.signal.bank())
    analysis.write_table(out / "ablate_patch.csv", run.tag(rows))
    for r in rows:
        print(f"{r['patch_s']:>5} s: {r['metric']} {r['mean']:.4f} +/- {r['std']:.4f}")
    return rows


def _pretrain_split(run: Run, manifest: DatasetManifest):
    windows = run.pretrain_windows(manifest)
    params = run.pretrain_params()
    train, held = split_indices(len(windows), params.heldout_frac, params.seed)
    task = run.train_test(manifest) if run.cfg.analysis.downstream else None
    return windows, train, held, params, task


def cmd_ablate_objectives(run: Run) -> list[dict]:
    manifest = run.manifest()
    windows, train, held, params, task = _pretrain_split(run, manifest)
    out = run.prepare_out()
    rows = analysis.ablate_objectives(windows[train], windows[held], run.backbone_config(), params,
                                      run.cfg.pretrain.loss_weights, task, run.cfg.finetune, run.seeds)
    analysis.write_table(out / "ablate_objectives.csv", run.tag(rows))
    for r in rows:
        print(f"{r['row']:>12}: held-out total {r['heldout_total']:.6f}")
    return rows


def cmd_scale_study(run: Run) -> dict:
    manifest = run.manifest()
    windows, _, _, params, task = _pretrain_split(run, manifest)
    out = run.prepare_out()
    study = analysis.scale_study(windows, run.cfg.analysis.fractions, run.backbone_config(), params,
                                 params.heldout_frac, params.seed, task, run.cfg.finetune, run.seeds)
    analysis.write_table(out / "scale_curves.csv", run.tag(study.curves))
    analysis.write_table(out / "scale_table.csv", run.tag(study.table))
    for r in study.table:
        print(f"fraction {r['fraction']:.2f}: {r['n_train']} windows, final held-out {r['final_heldout_total']:.6f}")
    return {"table": study.table}


def cmd_saliency(run: Run) -> dict:
    if not run.checkpoint:
        raise FileNotFoundError("saliency needs --checkpoint pointing at a fine-tuned model")
    blob = load_checkpoint(run.checkpoint)
    if blob["meta"].get("kind") != "finetune":
        raise CompatibilityError(f"{run.checkpoint} is not a fine-tuned checkpoint")
    run.check_compatible(blob)
    model = _finetuned_blob_model(blob)
    manifest = run.manifest()
    _, test = run.train_test(manifest)
    smap = analysis.mean_saliency(model, test.x, run.cfg.signal.bank().names)
    out = run.prepare_out()
    analysis.write_table(out / "saliency.csv", run.tag(smap.rows()))
    top = int(np.argmax(smap.mass))
    print(f"saliency: top band {smap.band_names[top]} ({smap.mass[top]:.3f}) over {len(test)} windows -> {out}")
    return {"mass": smap.mass.tolist()}


HANDLERS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "ablate-bands": cmd_ablate_bands, "ablate-objectives": cmd_ablate_objectives,
            "ablate-patch": cmd_ablate_patch, "scale-study": cmd_scale_study, "saliency": cmd_saliency}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pimt", description="Multi-band ExG tokenization experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="base seed, overrides the config")
        p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to repeat over")
        p.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/<command>-<hash>)")
        p.add_argument("--checkpoint", help="pre-trained or fine-tuned checkpoint")
        p.add_argument("--data", help="dataset directory, overrides data.dir")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.seeds < 1:
            raise PimtError("--seeds must be at least 1")
        run = Run(args.command, args)
        HANDLERS[args.command](run)
    except TrainingDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (PimtError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
