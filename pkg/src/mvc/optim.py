"""SGD / Adam with coupled weight decay and multi-step learning-rate schedules.

Recipe presets hold the pretraining, linear-probe and finetuning values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.03
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        self.betas = tuple(self.betas)


@dataclass
class MultiStepSchedule:
    milestones: tuple
    factor: float

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.factor <= 1:
            raise ValueError("factor must exceed 1")


def schedule_lr(base_lr: float, epoch: int, sched: MultiStepSchedule) -> float:
    """Learning rate for 0-indexed ``epoch``.

    A milestone N ("after the Nth epoch", 1-indexed) takes effect from 0-indexed
    epoch N onwards.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    drops = sum(1 for m in sched.milestones if m < epoch + 1)
    return base_lr / sched.factor**drops


def _finite(update: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(update)):
        raise T.NonFiniteError(f"non-finite update for {name}")


def sgd_step(params: Sequence[T.Tensor], state: dict, cfg: OptimizerConfig, lr: float | None = None) -> None:
    """g <- grad + wd * w; buf <- momentum * buf + g; w <- w - lr * buf."""
    lr = cfg.lr if lr is None else lr
    bufs = state.setdefault("momentum_buffer", {})
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
        if cfg.momentum:
            buf = bufs.get(i)
            buf = g.copy() if buf is None else cfg.momentum * buf + g
            bufs[i] = buf
        else:
            buf = g
        new = p.data - lr * buf
        _finite(new, f"param {i}")
        p.data = new.astype(p.data.dtype, copy=False)


def adam_step(params: Sequence[T.Tensor], state: dict, cfg: OptimizerConfig, lr: float | None = None) -> None:
    """Bias-corrected Adam with the weight decay added to the gradient."""
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    m_state = state.setdefault("exp_avg", {})
    v_state = state.setdefault("exp_avg_sq", {})
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
        m = b1 * m_state.get(i, 0.0) + (1 - b1) * g
        v = b2 * v_state.get(i, 0.0) + (1 - b2) * g * g
        m_state[i], v_state[i] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        _finite(new, f"param {i}")
        p.data = new.astype(p.data.dtype, copy=False)


class Optimizer:
    """Applies ``sgd_step`` or ``adam_step`` to a fixed parameter list."""

    def __init__(self, params: Sequence[T.Tensor], cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state: dict = {}
        self.lr = cfg.lr

    def step(self) -> None:
        fn = sgd_step if self.cfg.kind == "sgd" else adam_step
        fn(self.params, self.state, self.cfg, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {"step": self.state.get("step", 0)}
        for key in ("momentum_buffer", "exp_avg", "exp_avg_sq"):
            for i, arr in self.state.get(key, {}).items():
                T.save_array(directory / f"{key}.{i}", arr)
        meta["slots"] = {key: sorted(self.state.get(key, {})) for key in ("momentum_buffer", "exp_avg", "exp_avg_sq")}
        (directory / "optimizer.json").write_text(json.dumps(meta, sort_keys=True))

    def load(self, directory) -> None:
        directory = Path(directory)
        meta = json.loads((directory / "optimizer.json").read_text())
        self.state = {}
        if meta["step"]:
            self.state["step"] = meta["step"]
        for key, slots in meta["slots"].items():
            if slots:
                self.state[key] = {int(i): T.load_array(directory / f"{key}.{i}") for i in slots}


@dataclass(frozen=True)
class Recipe:
    epochs: int
    batch_size: int
    optimizer: OptimizerConfig
    schedule: MultiStepSchedule


PRETRAIN_RECIPE = Recipe(
    epochs=400,
    batch_size=100,
    optimizer=OptimizerConfig("sgd", lr=0.03, momentum=0.9, weight_decay=1e-4),
    schedule=MultiStepSchedule((250, 300, 350), 10),
)

PROBE_SCHEDULE = MultiStepSchedule((30, 35, 40, 45), 5)

PROBE_PRESETS = {
    "default": Recipe(50, 256, OptimizerConfig("adam", lr=1e-3, momentum=0.0, weight_decay=0.0), PROBE_SCHEDULE),
    "aid": Recipe(50, 256, OptimizerConfig("adam", lr=1e-3, momentum=0.0, weight_decay=1e-2), PROBE_SCHEDULE),
    "mlrsnet": Recipe(50, 256, OptimizerConfig("adam", lr=1e-2, momentum=0.0, weight_decay=1e-2), PROBE_SCHEDULE),
}

FINETUNE_RECIPE = Recipe(
    epochs=100,
    batch_size=100,
    optimizer=OptimizerConfig("adam", lr=1e-4, momentum=0.0, weight_decay=1e-4),
    schedule=MultiStepSchedule((60, 70, 80, 90), 5),
)
