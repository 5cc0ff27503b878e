"""Contrastive multiview objective with a memory bank of negatives.

The k-negative loss is evaluated exactly (log-sum-exp over the positive and
k negatives) rather than through a noise-contrastive approximation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .config import rng_stream
from .tensor import Tensor

log = logging.getLogger(__name__)

UNIT_TOL = 1e-4


class BankError(ValueError):
    pass


@dataclass
class ContrastiveConfig:
    k: int = 4096
    tau: float = 0.07
    symmetric: bool = True
    momentum: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("bank momentum must lie in [0, 1)")

    def effective_k(self, n_items: int) -> int:
        if self.k > n_items - 1:
            log.warning("k=%d exceeds dataset size %d - 1; clamping to %d", self.k, n_items, n_items - 1)
            return n_items - 1
        return self.k


def similarity(h1, h2, tau: float) -> float:
    """exp(cos(h1, h2) / tau) for unit vectors."""
    h1, h2 = np.asarray(h1, dtype=np.float64), np.asarray(h2, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    n1, n2 = np.linalg.norm(h1), np.linalg.norm(h2)
    if n1 < T.NORM_EPS or n2 < T.NORM_EPS:
        raise T.DegenerateInputError("similarity of a zero vector")
    if abs(n1 - 1) > UNIT_TOL or abs(n2 - 1) > UNIT_TOL:
        raise ValueError("similarity expects unit-norm inputs")
    return float(np.exp(h1 @ h2 / (n1 * n2 * tau)))


def _check_unit_rows(x: np.ndarray, what: str) -> None:
    norms = np.sqrt((np.asarray(x, dtype=np.float64) ** 2).sum(axis=-1))
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{what} rows must be unit-norm (max deviation {np.abs(norms - 1).max():.2e})")


def contrastive_loss(anchor: Tensor, positive: Tensor, negatives, tau: float) -> Tensor:
    """Mean over the batch of -log(s(a, p) / (s(a, p) + sum_j s(a, n_j))).

    ``anchor`` and ``positive`` are [B, d]; ``negatives`` is [B, k, d] (array or Tensor).
    Cosines are taken between re-normalized rows, so the value matches the
    similarity definition even for slightly perturbed inputs.
    """
    anchor, positive, negatives = T.as_tensor(anchor), T.as_tensor(positive), T.as_tensor(negatives)
    if negatives.ndim != 3 or negatives.shape[0] != anchor.shape[0] or negatives.shape[2] != anchor.shape[1]:
        raise T.ShapeError(f"negatives must be [B, k, d], got {negatives.shape} for anchors {anchor.shape}")
    if negatives.shape[1] < 1:
        raise ValueError("need at least one negative")
    if tau <= 0:
        raise ValueError("tau must be positive")
    for x, what in ((anchor, "anchor"), (positive, "positive")):
        _check_unit_rows(x.data, what)
    a = T.l2_normalize(anchor, axis=1)
    p = T.l2_normalize(positive, axis=1)
    if negatives.requires_grad:
        _check_unit_rows(negatives.data, "negative")
        n = T.l2_normalize(negatives, axis=2)
    else:
        # constant bank rows: normalize in place of the (large) checked op
        norms = np.sqrt(np.einsum("bkd,bkd->bk", negatives.data, negatives.data))[:, :, None]
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("negative rows must be unit-norm")
        n = T.Tensor(negatives.data / norms)
    logits = T.concat([T.reshape(T.rowwise_dot(a, p), (-1, 1)), T.batch_matvec(n, a)], axis=1)
    # the positive sits in column 0; softmax cross-entropy is the log-sum-exp stabilized ratio
    return T.softmax_cross_entropy(T.scale(logits, 1.0 / tau), np.zeros(anchor.shape[0], dtype=np.int64))


def sample_negatives(n_items: int, anchor_indices, k: int, rng: np.random.Generator) -> np.ndarray:
    """[B, k] indices drawn uniformly (with replacement) from {0..N-1} minus each anchor."""
    anchor_indices = np.asarray(anchor_indices, dtype=np.int64)
    if k > n_items - 1:
        raise BankError(f"k={k} exceeds N-1={n_items - 1}")
    if k < 1:
        raise BankError("k must be >= 1")
    if np.any(anchor_indices < 0) or np.any(anchor_indices >= n_items):
        raise BankError("anchor index out of range")
    draws = rng.integers(0, n_items - 1, size=(anchor_indices.shape[0], k))
    return draws + (draws >= anchor_indices[:, None])


def random_unit_rows(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class MemoryBank:
    """Per-view tables of unit-norm contrastive representations, one row per item."""

    def __init__(self, n_items: int, dim: int, momentum: float = 0.5, seed: int = 0):
        if n_items < 2:
            raise BankError("memory bank needs at least two items")
        rng = rng_stream(seed, "bank")
        self.bank1 = random_unit_rows(n_items, dim, rng)
        self.bank2 = random_unit_rows(n_items, dim, rng)
        self.momentum = momentum

    @property
    def size(self) -> int:
        return self.bank1.shape[0]

    def update(self, indices, h1, h2, momentum: Optional[float] = None) -> None:
        bank_update(self, indices, h1, h2, self.momentum if momentum is None else momentum)

    def negatives(self, view: int, neg_idx: np.ndarray) -> np.ndarray:
        """Rows of the given view's bank at ``neg_idx`` ([B, k] -> [B, k, d])."""
        bank = self.bank1 if view == 1 else self.bank2
        return bank[neg_idx]

    def swapped(self) -> "MemoryBank":
        other = object.__new__(MemoryBank)
        other.bank1, other.bank2, other.momentum = self.bank2, self.bank1, self.momentum
        return other

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        T.save_array(directory / "bank1", self.bank1)
        T.save_array(directory / "bank2", self.bank2)

    def load(self, directory) -> None:
        directory = Path(directory)
        self.bank1 = T.load_array(directory / "bank1")
        self.bank2 = T.load_array(directory / "bank2")


def bank_update(bank: MemoryBank, indices, h1, h2, m: float) -> None:
    """row <- normalize(m * row + (1 - m) * h) for the given rows of both views."""
    indices = np.asarray(indices, dtype=np.int64)
    if np.any(indices < 0) or np.any(indices >= bank.size):
        raise BankError("bank index out of range")
    for table, h in ((bank.bank1, h1), (bank.bank2, h2)):
        h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)
        _check_unit_rows(h, "new representation")
        rows = m * table[indices] + (1.0 - m) * h
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        # rows that are already unit (m = 0 or 1) are stored as is, bit for bit
        table[indices] = np.where(np.abs(norms - 1.0) > 1e-12, rows / norms, rows)


def symmetric_loss(
    h1: Tensor,
    h2: Tensor,
    bank: Optional[MemoryBank],
    cfg: ContrastiveConfig,
    indices=None,
    neg_idx: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    positive: str = "live",
) -> Tensor:
    """L(V1 anchor) + L(V2 anchor); an anchor's negatives come from the other view's bank.

    The positive is the live representation of the other view of the same item.
    Pass ``neg_idx`` ([B, k]) to fix the negatives, otherwise they are drawn with
    ``rng`` around ``indices``.
    """
    if bank is None:
        raise BankError("memory bank is not initialized")
    if neg_idx is None:
        if indices is None or rng is None:
            raise ValueError("either neg_idx or (indices, rng) is required")
        neg_idx = sample_negatives(bank.size, indices, cfg.effective_k(bank.size), rng)
    dtype = T.get_dtype()
    pos2, pos1 = h2, h1
    if positive == "bank":
        if indices is None:
            raise ValueError("bank positives need the batch indices")
        pos2 = T.Tensor(bank.bank2[np.asarray(indices)].astype(dtype))
        pos1 = T.Tensor(bank.bank1[np.asarray(indices)].astype(dtype))
    elif positive != "live":
        raise ValueError(f"positive must be 'live' or 'bank', got {positive!r}")
    loss = contrastive_loss(h1, pos2, bank.negatives(2, neg_idx).astype(dtype), cfg.tau)
    if not cfg.symmetric:
        return loss
    return loss + contrastive_loss(h2, pos1, bank.negatives(1, neg_idx).astype(dtype), cfg.tau)
