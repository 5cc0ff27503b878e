"""Contrastive pretraining loop with exact checkpoint/resume.

Every source of randomness in an epoch (batch order, augmentation, negative
sampling) is drawn from streams keyed by (seed, epoch), so resuming from an
epoch boundary replays the same computation as an uninterrupted run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import rng_stream
from .contrastive import ContrastiveConfig, MemoryBank, sample_negatives, symmetric_loss
from .data import ChipDataset, augment
from .nn import CmcModel, load_state, save_module
from .optim import PRETRAIN_RECIPE, MultiStepSchedule, Optimizer, OptimizerConfig, schedule_lr
from .views import ViewSpec, apply_view_spec_batch

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    epochs: int = PRETRAIN_RECIPE.epochs
    batch_size: int = PRETRAIN_RECIPE.batch_size
    lr: float = PRETRAIN_RECIPE.optimizer.lr
    momentum: float = PRETRAIN_RECIPE.optimizer.momentum
    weight_decay: float = PRETRAIN_RECIPE.optimizer.weight_decay
    milestones: tuple = PRETRAIN_RECIPE.schedule.milestones
    lr_factor: float = PRETRAIN_RECIPE.schedule.factor
    k: int = 4096
    tau: float = 0.07
    bank_momentum: float = 0.5
    positive: str = "bank"
    crop_scale: tuple = (0.08, 1.0)
    augment: bool = True
    stage_widths: list = field(default_factory=lambda: [16, 32, 64, 64])
    embedding_dim: int = 64
    d_h: int = 32
    seed: int = 0

    @property
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.k, self.tau, True, self.bank_momentum)

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig("sgd", self.lr, self.momentum, weight_decay=self.weight_decay)

    @property
    def schedule(self) -> MultiStepSchedule:
        return MultiStepSchedule(self.milestones, self.lr_factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["crop_scale"] = list(self.crop_scale)
        return d


def batch_views(dataset: ChipDataset, indices, spec: ViewSpec, rng=None, crop_scale=(0.08, 1.0), out_size=None):
    """Views for the chips at ``indices``; augmented when ``rng`` is given."""
    chips = dataset.chips[indices]
    if rng is not None:
        size = out_size or chips.shape[-1]
        chips = np.stack([augment(chip, size, rng, crop_scale) for chip in chips])
    return apply_view_spec_batch(chips, spec, dataset.band_names, dtype=T.get_dtype())


class Pretrainer:
    """Owns the model, optimizer and memory bank for one pretraining run."""

    def __init__(self, dataset: ChipDataset, spec: ViewSpec, cfg: PretrainConfig, indices=None):
        self.dataset = dataset
        self.spec = spec
        self.cfg = cfg
        self.indices = np.asarray(dataset.split("train") if indices is None else indices)
        c1, c2 = spec.view_channels
        self.model = CmcModel.for_views(
            c1, c2, d_h=cfg.d_h, seed=cfg.seed, stage_widths=cfg.stage_widths, embedding_dim=cfg.embedding_dim
        )
        self.optimizer = Optimizer(self.model.parameters(), cfg.optimizer)
        self.contrastive = cfg.contrastive
        self.bank = MemoryBank(len(self.indices), cfg.d_h, cfg.bank_momentum, cfg.seed)
        self.k = self.contrastive.effective_k(len(self.indices))
        self.epoch = 0
        self.history: list = []

    def train_epoch(self) -> float:
        cfg, epoch = self.cfg, self.epoch
        self.model.train()
        self.optimizer.lr = schedule_lr(cfg.lr, epoch, cfg.schedule)
        order = rng_stream(cfg.seed, "data", epoch).permutation(len(self.indices))
        aug_rng = rng_stream(cfg.seed, "augment", epoch) if cfg.augment else None
        neg_rng = rng_stream(cfg.seed, "negatives", epoch)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            pos = order[start : start + cfg.batch_size]
            if len(pos) < 2:
                continue
            v1, v2 = batch_views(self.dataset, self.indices[pos], self.spec, aug_rng, cfg.crop_scale)
            h1, h2 = self.model(v1, v2)
            neg_idx = sample_negatives(self.bank.size, pos, self.k, neg_rng)
            loss = symmetric_loss(
                h1, h2, self.bank, self.contrastive, indices=pos, neg_idx=neg_idx, positive=cfg.positive
            )
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.bank.update(pos, h1.data, h2.data)
            losses.append(loss.item())
        self.epoch += 1
        mean_loss = float(np.mean(losses))
        self.history.append(mean_loss)
        return mean_loss

    def run(self, until_epoch: Optional[int] = None, on_epoch: Optional[Callable] = None) -> list:
        until = self.cfg.epochs if until_epoch is None else until_epoch
        while self.epoch < until:
            loss = self.train_epoch()
            log.info("epoch %d loss %.6f", self.epoch, loss)
            if on_epoch is not None:
                on_epoch(self.epoch, loss)
        return self.history

    def save(self, directory, view_spec_id: Optional[str] = None) -> None:
        directory = Path(directory)
        manifest = self.model.manifest()
        manifest.update(
            {
                "view_spec_id": view_spec_id or self.spec.spec_id,
                "epoch": self.epoch,
                "rng_seed": self.cfg.seed,
                "pretrain_config": self.cfg.to_dict(),
                "history": self.history,
                "n_pretrain": int(len(self.indices)),
            }
        )
        save_module(self.model, directory / "model", manifest)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        self.optimizer.save(directory / "optimizer")
        self.bank.save(directory / "bank")

    def load(self, directory) -> None:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        load_state(self.model, directory / "model")
        self.optimizer.load(directory / "optimizer")
        self.bank.load(directory / "bank")
        self.epoch = int(manifest["epoch"])
        self.history = list(manifest.get("history", []))


def load_model(directory) -> tuple:
    """(CmcModel, manifest) from a checkpoint directory."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    model = CmcModel.from_manifest(manifest)
    load_state(model, directory / "model")
    return model, manifest
