"""Fine-tuning heads, metrics, and the supervised training loop."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, MetricUndefinedError
from .model import Backbone, seeded
from .pretrain import cosine_lr
from .sigproc import augment_noise
from .tokenization import patchify

TASK_KINDS = ("classification", "gaze")


def pool_mean(z):
    """Mean over the token axis (second to last)."""
    if isinstance(z, torch.Tensor):
        return z.mean(dim=-2)
    return np.asarray(z).mean(axis=-2)


def classify(z: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    return head(pool_mean(z))


def predict_class(logits) -> np.ndarray:
    # argmax returns the first maximum, so ties go to the lowest class index
    return np.asarray(torch.as_tensor(logits).argmax(dim=-1))


def regress(z: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Per-token (per-patch) 2D angle predictions, averaged."""
    return head(z).mean(dim=-2)


def per_class_scores(preds, labels, classes=None) -> dict:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise MetricUndefinedError(f"{preds.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.size == 0:
        raise MetricUndefinedError("macro-F1 of an empty set is undefined")
    if classes is None:
        classes = sorted(set(labels.tolist()) | set(preds.tolist()))
    out = {}
    for k in classes:
        tp = int(np.sum((preds == k) & (labels == k)))
        fp = int(np.sum((preds == k) & (labels != k)))
        fn = int(np.sum((preds != k) & (labels == k)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[k] = {"precision": precision, "recall": recall, "f1": f1}
    return out


def macro_f1(preds, labels, classes=None) -> float:
    scores = per_class_scores(preds, labels, classes)
    return float(np.mean([s["f1"] for s in scores.values()]))


def angular_errors(pred, gt) -> np.ndarray:
    return np.linalg.norm(np.asarray(pred, dtype=float) - np.asarray(gt, dtype=float), axis=-1)


def angular_error(pred, gt) -> float:
    """Mean Euclidean distance between predicted and true (horizontal, vertical) angles, in degrees."""
    return float(np.mean(angular_errors(pred, gt)))


@dataclass
class MetricsReport:
    task: str
    n_samples: int
    macro_f1: float | None = None
    angular_error_deg: float | None = None
    per_class: dict = field(default_factory=dict)
    seed: int | None = None
    config_hash: str | None = None

    @property
    def primary(self) -> float:
        return self.macro_f1 if self.task == "classification" else self.angular_error_deg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d


def summarize(reports: Sequence[MetricsReport]) -> dict:
    """Mean and (population) std of the primary metric across seed repetitions."""
    vals = np.array([r.primary for r in reports], dtype=float)
    name = "macro_f1" if reports[0].task == "classification" else "angular_error_deg"
    return {"metric": name, "mean": float(vals.mean()), "std": float(vals.std()),
            "seeds": [r.seed for r in reports], "values": vals.tolist()}


@dataclass
class FinetuneConfig:
    batch_size: int | None = None  # None: 10 for gaze, 8 otherwise
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    epochs: int = 20
    freeze_encoder: bool = False
    noise_sigma_rel: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.lr_max <= 0 or self.lr_min <= 0:
            raise ConfigurationError(f"fine-tune settings must be positive: {self}")
        if self.batch_size is not None and self.batch_size <= 0:
            raise ConfigurationError("batch_size must be positive")

    def batch_for(self, kind: str) -> int:
        if self.batch_size:
            return self.batch_size
        return 10 if kind == "gaze" else 8


class FinetuneModel(nn.Module):
    """Backbone plus a linear head: pooled classification or per-patch gaze regression."""

    def __init__(self, backbone: Backbone, kind: str, n_classes: int = 2):
        super().__init__()
        if kind not in TASK_KINDS:
            raise ConfigurationError(f"unknown task kind {kind!r}")
        if kind == "classification" and n_classes < 2:
            raise ConfigurationError("classification needs at least two classes")
        self.kind = kind
        self.n_classes = n_classes
        self.backbone = backbone
        d = backbone.cfg.encoder.model_dim
        self.head = nn.Linear(d, n_classes if kind == "classification" else 2)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.backbone.cfg.grid_shape

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        return self.backbone.embed(patches)

    def from_embeddings(self, e: torch.Tensor) -> torch.Tensor:
        z = self.backbone.encoder(e)
        return classify(z, self.head) if self.kind == "classification" else regress(z, self.head)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.from_embeddings(self.embed(patches))

    def score(self, e: torch.Tensor) -> torch.Tensor:
        """Per-sample scalar used for attribution: predicted-class logit or regression norm."""
        out = self.from_embeddings(e)
        if self.kind == "classification":
            return out.gather(-1, out.argmax(-1, keepdim=True)).squeeze(-1)
        return out.norm(dim=-1)

    @torch.no_grad()
    def predict(self, windows: np.ndarray, batch_size: int = 64) -> np.ndarray:
        self.eval()
        w = self.backbone.cfg.patch_samples
        outs = []
        for s in range(0, len(windows), batch_size):
            patches = patchify(torch.as_tensor(windows[s:s + batch_size], dtype=torch.float32), w)
            outs.append(self(patches))
        out = torch.cat(outs).numpy()
        return predict_class(out) if self.kind == "classification" else out


def evaluate(model: FinetuneModel, windows: np.ndarray, labels: np.ndarray,
             classes: Sequence[int] | None = None) -> MetricsReport:
    pred = model.predict(windows)
    if model.kind == "classification":
        classes = list(range(model.n_classes)) if classes is None else classes
        pc = per_class_scores(pred, labels, classes)
        return MetricsReport("classification", len(labels),
                             macro_f1=float(np.mean([s["f1"] for s in pc.values()])), per_class=pc)
    return MetricsReport("gaze", len(labels), angular_error_deg=angular_error(pred, labels))


@dataclass
class FinetuneResult:
    model: FinetuneModel
    report: MetricsReport
    history: list[dict]


def run_finetune(backbone: Backbone, train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray,
                 test_y: np.ndarray, kind: str = "classification", cfg: FinetuneConfig | None = None,
                 n_classes: int | None = None) -> FinetuneResult:
    """Train a head (and by default the backbone) on labeled windows (n, F, C, T).

    The caller's backbone is copied, never modified.
    """
    cfg = cfg or FinetuneConfig()
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    if kind == "classification":
        if train_y.ndim != 1 or not np.issubdtype(train_y.dtype, np.integer):
            raise ConfigurationError("classification labels must be a 1-D integer array")
        n_classes = n_classes or int(max(train_y.max(), test_y.max())) + 1
    elif train_y.ndim != 2 or train_y.shape[1] != 2:
        raise ConfigurationError("gaze labels must be (n, 2) angles in degrees")
    model = seeded(cfg.seed, FinetuneModel, copy.deepcopy(backbone), kind, n_classes or 2)
    if cfg.freeze_encoder:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr_max, weight_decay=cfg.weight_decay)
    bs = cfg.batch_for(kind)
    n = len(train_x)
    total_steps = math.ceil(n / bs) * cfg.epochs
    w = model.backbone.cfg.patch_samples
    y_all = torch.as_tensor(train_y, dtype=torch.long if kind == "classification" else torch.float32)
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        rng = np.random.default_rng([cfg.seed, epoch, 17])
        order = rng.permutation(n)
        running = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            batch = train_x[idx]
            if cfg.noise_sigma_rel > 0:
                batch = augment_noise(batch, cfg.noise_sigma_rel, seed=int(rng.integers(2**31)))
            patches = patchify(torch.as_tensor(batch, dtype=torch.float32), w)
            out = model(patches)
            y = y_all[idx]
            loss = F.cross_entropy(out, y) if kind == "classification" else F.mse_loss(out, y)
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            step += 1
            running += float(loss.detach()) * len(idx)
        history.append({"epoch": epoch, "train_loss": running / n})
    report = evaluate(model, test_x, test_y)
    report.seed = cfg.seed
    return FinetuneResult(model, report, history)


def run_finetune_seeds(backbone_for_seed: Callable[[int], Backbone], train_x, train_y, test_x, test_y,
                       kind: str = "classification", cfg: FinetuneConfig | None = None,
                       seeds: Sequence[int] = (0, 1, 2), n_classes: int | None = None):
    """Repeat fine-tuning over ``seeds``; returns (results, summary with mean and std)."""
    cfg = cfg or FinetuneConfig()
    results = []
    for s in seeds:
        results.append(run_finetune(backbone_for_seed(s), train_x, train_y, test_x, test_y, kind,
                                    replace(cfg, seed=s), n_classes))
    return results, summarize([r.report for r in results])

