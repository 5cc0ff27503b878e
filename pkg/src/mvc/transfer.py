"""Transfer evaluation: frozen-feature linear probe, full finetuning, and metrics."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .config import rng_stream
from .data import ChipDataset, augment, bilinear_resize, resize_for_eval
from .nn import ClassifierHead, CmcModel
from .optim import FINETUNE_RECIPE, PROBE_PRESETS, MultiStepSchedule, Optimizer, OptimizerConfig, schedule_lr
from .views import ViewSpec, apply_view_spec_batch

log = logging.getLogger(__name__)

LEDGER_COLUMNS = ("task", "pretrain_source", "views", "n_pretrain", "protocol", "metric", "value", "seed")


# -- metrics ------------------------------------------------------------------------


def accuracy(predictions, targets) -> float:
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    if predictions.shape != targets.shape or predictions.size == 0:
        raise ValueError("predictions and targets must be non-empty and of equal shape")
    return float((predictions == targets).mean())


def average_precision(scores, targets) -> float:
    """Mean of precision@rank over the ranks of the positives; ties go to the lower index."""
    scores, targets = np.asarray(scores, dtype=float), np.asarray(targets)
    order = np.argsort(-scores, kind="stable")
    hits = targets[order] > 0
    if not hits.any():
        raise ValueError("average precision needs at least one positive")
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].mean())


def per_class_ap(scores, targets) -> np.ndarray:
    """AP per class; NaN for classes without positives."""
    scores, targets = np.asarray(scores, dtype=float), np.asarray(targets)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise ValueError("scores and targets must both be [N, C]")
    out = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        if targets[:, c].any():
            out[c] = average_precision(scores[:, c], targets[:, c])
    return out


def macro_map(scores, targets) -> float:
    """Unweighted mean of per-class average precision; classes without positives are skipped."""
    aps = per_class_ap(scores, targets)
    if np.all(np.isnan(aps)):
        raise ValueError("macro mAP undefined: no class has a positive target")
    skipped = np.flatnonzero(np.isnan(aps))
    if skipped.size:
        log.info("macro_map: skipping classes without positives: %s", skipped.tolist())
    return float(np.nanmean(aps))


# -- configs and reports --------------------------------------------------------------


@dataclass
class ProbeConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    milestones: tuple = (30, 35, 40, 45)
    lr_factor: float = 5.0
    eval_size: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ProbeConfig":
        recipe = PROBE_PRESETS[name]
        base = dict(
            epochs=recipe.epochs, batch_size=recipe.batch_size, lr=recipe.optimizer.lr,
            weight_decay=recipe.optimizer.weight_decay, milestones=recipe.schedule.milestones,
            lr_factor=recipe.schedule.factor,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class FinetuneConfig:
    epochs: int = FINETUNE_RECIPE.epochs
    batch_size: int = FINETUNE_RECIPE.batch_size
    lr: float = FINETUNE_RECIPE.optimizer.lr
    weight_decay: float = FINETUNE_RECIPE.optimizer.weight_decay
    milestones: tuple = FINETUNE_RECIPE.schedule.milestones
    lr_factor: float = FINETUNE_RECIPE.schedule.factor
    augment: bool = True
    crop_scale: tuple = (0.08, 1.0)
    eval_size: Optional[int] = None
    freeze_bn_stats: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    per_class: list = field(default_factory=list)
    config_fingerprint: str = ""
    seed: int = 0
    protocol: str = "linear"
    pretrain_source: str = ""
    views: str = ""
    n_pretrain: int = 0

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def ledger_row(self) -> dict:
        return {
            "task": self.task, "pretrain_source": self.pretrain_source, "views": self.views,
            "n_pretrain": self.n_pretrain, "protocol": self.protocol, "metric": self.metric,
            "value": repr(float(self.value)), "seed": self.seed,
        }


def append_ledger(path, report: EvalReport) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LEDGER_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow(report.ledger_row())


# -- features --------------------------------------------------------------------------


def eval_views(dataset: ChipDataset, indices, spec: ViewSpec, eval_size: Optional[int] = None) -> tuple:
    chips = dataset.chips[indices]
    if eval_size is not None:
        chips = np.stack([resize_for_eval(c, eval_size) for c in chips])
    return apply_view_spec_batch(chips, spec, dataset.band_names, dtype=T.get_dtype())


def extract_dataset_features(
    model: CmcModel, dataset: ChipDataset, indices, spec: ViewSpec, eval_size=None, batch_size: int = 256
) -> np.ndarray:
    """Eval-mode concat(z1, z2) for every chip at ``indices``, without augmentation."""
    indices = np.asarray(indices)
    out = []
    for start in range(0, len(indices), batch_size):
        v1, v2 = eval_views(dataset, indices[start : start + batch_size], spec, eval_size)
        out.append(model.extract_features(v1, v2))
    return np.concatenate(out) if out else np.zeros((0, model.feature_dim), dtype=T.get_dtype())


class FeatureCache:
    """Features per (model fingerprint, split); reused across probe runs."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self._memory: dict = {}

    def get(self, key: str, compute, feature_dim: int) -> np.ndarray:
        if key in self._memory:
            feats = self._memory[key]
        elif self.directory is not None and (self.directory / f"{key}.npy").exists():
            feats = np.load(self.directory / f"{key}.npy")
        else:
            feats = compute()
            if self.directory is not None:
                self.directory.mkdir(parents=True, exist_ok=True)
                np.save(self.directory / f"{key}.npy", feats)
        if feats.ndim != 2 or feats.shape[1] != feature_dim:
            raise T.ShapeError(f"cached features have shape {feats.shape}, model yields {feature_dim}")
        self._memory[key] = feats
        return feats


def model_fingerprint(model: CmcModel) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


# -- heads ------------------------------------------------------------------------------


def _targets(dataset: ChipDataset, indices):
    return dataset.labels[indices]


def evaluate_head(head: ClassifierHead, features: np.ndarray, targets: np.ndarray, task: str) -> EvalReport:
    if head.mode == "single_label":
        return EvalReport(task, "accuracy", accuracy(head.predict(features), targets))
    scores = head.predict(features)
    aps = per_class_ap(scores, targets)
    return EvalReport(task, "macro_mAP", macro_map(scores, targets), [None if np.isnan(a) else float(a) for a in aps])


def train_head(
    features: np.ndarray, targets: np.ndarray, mode: str, num_classes: int, cfg: ProbeConfig
) -> tuple:
    """Adam-trained linear head on fixed features; returns (head, per-epoch mean losses)."""
    head = ClassifierHead(features.shape[1], num_classes, mode, rng=rng_stream(cfg.seed, "head"))
    opt = Optimizer(head.parameters(), OptimizerConfig("adam", cfg.lr, 0.0, weight_decay=cfg.weight_decay))
    sched = MultiStepSchedule(cfg.milestones, cfg.lr_factor)
    features = features.astype(T.get_dtype(), copy=False)
    losses = []
    for epoch in range(cfg.epochs):
        opt.lr = schedule_lr(cfg.lr, epoch, sched)
        order = rng_stream(cfg.seed, "probe", epoch).permutation(len(features))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = head.loss(T.Tensor(features[idx]), targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
    return head, losses


def run_linear_probe(
    model: CmcModel,
    dataset: ChipDataset,
    spec: ViewSpec,
    cfg: ProbeConfig,
    task: str = "synthetic",
    cache: Optional[FeatureCache] = None,
    train_split: str = "train",
    test_split: str = "test",
) -> tuple:
    """Train a linear head on frozen features of ``train_split``; report on ``test_split``."""
    cache = cache or FeatureCache()
    fp = model_fingerprint(model)
    suffix = f"{spec.spec_id}-{cfg.eval_size}"
    tr_idx, te_idx = dataset.split(train_split), dataset.split(test_split)
    train_feats = cache.get(
        f"{fp}-{suffix}-{train_split}",
        lambda: extract_dataset_features(model, dataset, tr_idx, spec, cfg.eval_size),
        model.feature_dim,
    )
    test_feats = cache.get(
        f"{fp}-{suffix}-{test_split}",
        lambda: extract_dataset_features(model, dataset, te_idx, spec, cfg.eval_size),
        model.feature_dim,
    )
    head, _ = train_head(train_feats, _targets(dataset, tr_idx), dataset.task_mode, dataset.num_classes, cfg)
    report = evaluate_head(head, test_feats, _targets(dataset, te_idx), task)
    report.config_fingerprint = fingerprint(asdict(cfg))
    report.seed = cfg.seed
    report.protocol = "linear"
    report.views = spec.spec_id
    return head, report


class FinetuneNet:
    """A CMC model's two encoders with a linear head on concat(z1, z2)."""

    def __init__(self, model: CmcModel, head: ClassifierHead):
        self.model = model
        self.head = head

    def parameters(self) -> list:
        return self.model.encoder1.parameters() + self.model.encoder2.parameters() + self.head.parameters()

    def logits(self, v1, v2):
        return self.head(self.model.features(v1, v2))


def _finetune_batch(dataset, indices, spec, cfg: FinetuneConfig, size: int, rng):
    chips = dataset.chips[indices]
    if cfg.augment:
        # rescale by 256/224 first, then random-resized-crop back to the working size
        big = int(round(size * 256 / 224))
        chips = np.stack([augment(bilinear_resize(c, big), size, rng, cfg.crop_scale) for c in chips])
    else:
        chips = np.stack([resize_for_eval(c, size) for c in chips])
    return apply_view_spec_batch(chips, spec, dataset.band_names, dtype=T.get_dtype())


def run_finetune(
    model: CmcModel,
    dataset: ChipDataset,
    spec: ViewSpec,
    cfg: FinetuneConfig,
    task: str = "synthetic",
    train_split: str = "train",
    test_split: str = "test",
) -> tuple:
    """Train all encoder parameters plus a linear head; returns (FinetuneNet, report, losses)."""
    head = ClassifierHead(model.feature_dim, dataset.num_classes, dataset.task_mode, rng=rng_stream(cfg.seed, "head"))
    net = FinetuneNet(model, head)
    for m in model.modules():
        if hasattr(m, "freeze_stats"):
            m.freeze_stats = cfg.freeze_bn_stats
    opt = Optimizer(net.parameters(), OptimizerConfig("adam", cfg.lr, 0.0, weight_decay=cfg.weight_decay))
    sched = MultiStepSchedule(cfg.milestones, cfg.lr_factor)
    tr_idx, te_idx = dataset.split(train_split), dataset.split(test_split)
    size = cfg.eval_size or dataset.chips.shape[-1]
    losses = []
    for epoch in range(cfg.epochs):
        model.train()
        opt.lr = schedule_lr(cfg.lr, epoch, sched)
        order = rng_stream(cfg.seed, "finetune", epoch).permutation(len(tr_idx))
        aug_rng = rng_stream(cfg.seed, "finetune-augment", epoch)
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = tr_idx[order[start : start + cfg.batch_size]]
            if len(idx) < 2:
                continue
            v1, v2 = _finetune_batch(dataset, idx, spec, cfg, size, aug_rng)
            loss = head.loss(net.model.features(v1, v2), dataset.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
    test_feats = extract_dataset_features(model, dataset, te_idx, spec, cfg.eval_size)
    report = evaluate_head(head, test_feats, dataset.labels[te_idx], task)
    report.config_fingerprint = fingerprint(asdict(cfg))
    report.seed = cfg.seed
    report.protocol = "finetune"
    report.views = spec.spec_id
    return net, report, losses
