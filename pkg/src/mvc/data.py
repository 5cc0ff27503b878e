"""Chip datasets: MSC1 chip files, a synthetic multispectral scene generator,
augmentations and split management."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import rng_stream
from .views import RGB_BANDS, SENTINEL2_BANDS, normalize_band_name

MAGIC = b"MSCHIP01"
HEADER = struct.Struct("<IIII")
DTYPE_CODES = {0: np.dtype("<f4")}
SPLITS = ("train", "val", "test")


class ChipFileError(ValueError):
    pass


class ChipFormatError(ChipFileError):
    pass


class ChipTruncatedError(ChipFileError):
    pass


class ChipDtypeError(ChipFileError):
    pass


@dataclass
class Chip:
    bands: np.ndarray
    band_names: list
    label: object
    id: str

    def __post_init__(self):
        if self.bands.shape[0] != len(self.band_names):
            raise ValueError(f"chip {self.id}: {self.bands.shape[0]} bands but {len(self.band_names)} names")
        if not np.all(np.isfinite(self.bands)):
            raise ValueError(f"chip {self.id}: non-finite values")


# -- MSC1 chip files ----------------------------------------------------------------


def encode_chip(bands: np.ndarray) -> bytes:
    bands = np.asarray(bands)
    if bands.ndim != 3:
        raise ChipFileError(f"chip must be [C, H, W], got {bands.shape}")
    c, h, w = bands.shape
    return MAGIC + HEADER.pack(c, h, w, 0) + np.ascontiguousarray(bands, dtype="<f4").tobytes()


def decode_chip(raw: bytes) -> np.ndarray:
    if len(raw) < len(MAGIC) + HEADER.size:
        raise ChipTruncatedError(f"chip file holds {len(raw)} bytes, header needs {len(MAGIC) + HEADER.size}")
    if raw[: len(MAGIC)] != MAGIC:
        raise ChipFormatError(f"bad magic {raw[:len(MAGIC)]!r}")
    c, h, w, code = HEADER.unpack_from(raw, len(MAGIC))
    if code not in DTYPE_CODES:
        raise ChipDtypeError(f"unsupported dtype code {code}")
    dtype = DTYPE_CODES[code]
    body = raw[len(MAGIC) + HEADER.size :]
    expected = c * h * w * dtype.itemsize
    if len(body) < expected:
        raise ChipTruncatedError(f"chip body holds {len(body)} bytes, expected {expected}")
    if len(body) > expected:
        raise ChipFormatError(f"{len(body) - expected} trailing bytes after chip body")
    return np.frombuffer(body, dtype=dtype).astype(np.float32).reshape(c, h, w)


def write_chip_file(path, bands: np.ndarray) -> None:
    Path(path).write_bytes(encode_chip(bands))


def read_chip_file(path) -> np.ndarray:
    return decode_chip(Path(path).read_bytes())


# -- datasets -----------------------------------------------------------------------


def assign_splits(n: int, fractions: Sequence[float], seed: int) -> dict:
    """Disjoint train/val/test index arrays; a pure function of (n, fractions, seed)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be three non-negative values summing to 1")
    order = rng_stream(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }


@dataclass
class ChipDataset:
    chips: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] class indices or [N, K] multi-hot
    ids: list
    band_names: list
    task_mode: str
    num_classes: int
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task_mode not in ("single_label", "multi_label"):
            raise ValueError(f"unknown task mode {self.task_mode!r}")
        if len(self.ids) != len(self.chips) or len(self.labels) != len(self.chips):
            raise ValueError("chips, labels and ids disagree in length")
        if self.chips.shape[1] != len(self.band_names):
            raise ValueError("band names do not match the channel count")
        seen = np.zeros(len(self), dtype=int)
        for name, idx in self.splits.items():
            if name not in SPLITS:
                raise ValueError(f"unknown split {name!r}")
            np.add.at(seen, idx, 1)
        if self.splits and not np.all(seen == 1):
            raise ValueError("every chip must belong to exactly one split")

    def __len__(self) -> int:
        return len(self.chips)

    def __getitem__(self, i: int) -> Chip:
        return Chip(self.chips[i], list(self.band_names), self.labels[i], self.ids[i])

    def split(self, name: str) -> np.ndarray:
        return self.splits[name]

    def subset(self, indices) -> "ChipDataset":
        indices = np.asarray(indices)
        return ChipDataset(
            self.chips[indices], self.labels[indices], [self.ids[i] for i in indices],
            list(self.band_names), self.task_mode, self.num_classes,
        )

    def select_bands(self, names: Sequence[str]) -> "ChipDataset":
        idx = [self.band_names.index(n) for n in names]
        return ChipDataset(
            self.chips[:, idx], self.labels, list(self.ids), list(names), self.task_mode,
            self.num_classes, dict(self.splits),
        )

    def save(self, root) -> None:
        """Write MSC1 chips, a JSONL label index, split id lists and metadata."""
        root = Path(root)
        (root / "chips").mkdir(parents=True, exist_ok=True)
        (root / "splits").mkdir(exist_ok=True)
        lines = []
        for chip_id, bands, label in zip(self.ids, self.chips, self.labels):
            rel = f"chips/{chip_id}.msc"
            write_chip_file(root / rel, bands)
            lab = int(label) if self.task_mode == "single_label" else [int(v) for v in label]
            lines.append(json.dumps({"id": chip_id, "path": rel, "label": lab}))
        (root / "index.jsonl").write_text("\n".join(lines) + "\n")
        for name, idx in self.splits.items():
            (root / "splits" / f"{name}.json").write_text(json.dumps([self.ids[i] for i in idx]))
        meta = {"band_names": self.band_names, "task_mode": self.task_mode, "num_classes": self.num_classes}
        (root / "dataset.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, root) -> "ChipDataset":
        root = Path(root)
        meta_path = root / "dataset.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"no dataset.json under {root}")
        meta = json.loads(meta_path.read_text())
        ids, chips, labels = [], [], []
        for line in (root / "index.jsonl").read_text().splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            ids.append(entry["id"])
            chips.append(read_chip_file(root / entry["path"]))
            labels.append(entry["label"])
        position = {chip_id: i for i, chip_id in enumerate(ids)}
        splits = {}
        for name in SPLITS:
            path = root / "splits" / f"{name}.json"
            if path.exists():
                splits[name] = np.array(sorted(position[i] for i in json.loads(path.read_text())), dtype=np.int64)
        return cls(
            np.stack(chips), np.array(labels, dtype=np.int64), ids, list(meta["band_names"]),
            meta["task_mode"], int(meta["num_classes"]), splits,
        )


# -- synthetic scenes -------------------------------------------------------------------


@dataclass
class SynthConfig:
    num_chips: int = 2000
    C: int = 10
    H: int = 32
    num_classes: int = 8
    signature_matrix: Optional[np.ndarray] = None
    noise_std: float = 0.02
    patch_mixture: bool = False
    seed: int = 0
    band_names: Optional[list] = None
    split_fractions: tuple = (0.5, 0.0, 0.5)
    # class pairs share their RGB-band reflectance, so part of the class
    # information lives only outside the RGB bands
    rgb_confusable: bool = True
    separation: float = 0.1
    grid: int = 4
    field_range: tuple = (0.5, 1.5)
    max_regions: int = 3

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.band_names is None:
            self.band_names = list(SENTINEL2_BANDS) if self.C == len(SENTINEL2_BANDS) else [
                f"b{i}" for i in range(self.C)
            ]
        if len(self.band_names) != self.C:
            raise ValueError("band_names must have C entries")
        if self.signature_matrix is not None:
            self.signature_matrix = np.asarray(self.signature_matrix, dtype=np.float64)
            if self.signature_matrix.shape != (self.num_classes, self.C):
                raise ValueError(f"signature matrix must be [{self.num_classes} x {self.C}]")


def default_signatures(
    num_classes: int,
    channels: int,
    seed: int,
    rgb_confusable: bool = True,
    separation: float = 0.1,
    shared_bands: Sequence[int] = (0, 1, 2),
) -> np.ndarray:
    """Reflectance-like class spectra: a shared base spectrum plus class offsets of size ``separation``.

    With ``rgb_confusable``, class c and class c + num_classes // 2 get equal
    values in ``shared_bands``.
    """
    rng = rng_stream(seed, "signatures")
    base = rng.uniform(0.2, 0.5, size=channels)
    sig = base + separation * rng.uniform(-0.5, 0.5, size=(num_classes, channels))
    shared = list(shared_bands)
    if rgb_confusable and channels > len(shared):
        half = num_classes // 2
        sig[half : 2 * half, shared] = sig[:half, shared]
    return np.clip(sig, 0.01, 1.0)


def rgb_band_indices(band_names: Sequence) -> list:
    """Positions of the red, green and blue bands, or the first three channels if unnamed."""
    names = [normalize_band_name(b) for b in band_names]
    if all(b in names for b in RGB_BANDS):
        return sorted(names.index(b) for b in RGB_BANDS)
    return [0, 1, 2]


def check_signatures(sig: np.ndarray, min_separation: float = 1e-3) -> None:
    diffs = np.abs(sig[:, None, :] - sig[None, :, :]).max(axis=2)
    np.fill_diagonal(diffs, np.inf)
    if diffs.min() < min_separation:
        raise ValueError("degenerate signature matrix: two classes have (near-)identical signatures")


def bilinear_resize(image: np.ndarray, out_h: int, out_w: Optional[int] = None) -> np.ndarray:
    """Resize [C, h, w] to [C, out_h, out_w] with half-pixel-centre bilinear sampling."""
    out_w = out_h if out_w is None else out_w
    _, h, w = image.shape

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, rw = axis_weights(h, out_h)
    c0, c1, cw = axis_weights(w, out_w)
    rows = image[:, r0, :] * (1 - rw)[None, :, None] + image[:, r1, :] * rw[None, :, None]
    return rows[:, :, c0] * (1 - cw)[None, None, :] + rows[:, :, c1] * cw[None, None, :]


def smooth_field(rng: np.random.Generator, grid: int, size: int, low: float, high: float, n: int = 1) -> np.ndarray:
    """[n, size, size] bilinear upsampling of random grid x grid values in [low, high]."""
    return bilinear_resize(rng.uniform(low, high, size=(n, grid, grid)), size)


def generate_synthetic(cfg: SynthConfig) -> ChipDataset:
    """Chips whose pixels are class signatures modulated by a smooth field, plus noise.

    Single-label chips carry one class; multi-label chips (``patch_mixture``)
    split the frame into 1..max_regions smooth regions, each with its own class.
    """
    sig = cfg.signature_matrix
    if sig is None:
        sig = default_signatures(
            cfg.num_classes, cfg.C, cfg.seed, cfg.rgb_confusable, cfg.separation, rgb_band_indices(cfg.band_names)
        )
    check_signatures(sig)
    rng = rng_stream(cfg.seed, "synth")
    n, c, size, k = cfg.num_chips, cfg.C, cfg.H, cfg.num_classes
    chips = np.empty((n, c, size, size), dtype=np.float32)
    multi = cfg.patch_mixture
    labels = np.zeros((n, k), dtype=np.int64) if multi else np.zeros(n, dtype=np.int64)
    for i in range(n):
        field_ = smooth_field(rng, cfg.grid, size, *cfg.field_range)[0]
        if multi:
            n_regions = int(rng.integers(1, cfg.max_regions + 1))
            classes = rng.choice(k, size=n_regions, replace=False)
            weights = smooth_field(rng, cfg.grid, size, 0.0, 1.0, n_regions)
            region = weights.argmax(axis=0)
            spectra = sig[classes][region]  # [H, W, C]
            labels[i, classes[np.unique(region)]] = 1
        else:
            cls = int(rng.integers(k))
            spectra = np.broadcast_to(sig[cls], (size, size, c))
            labels[i] = cls
        noise = rng.standard_normal((c, size, size)) * cfg.noise_std
        chips[i] = np.moveaxis(spectra, -1, 0) * field_[None] + noise
    ids = [f"chip{i:05d}" for i in range(n)]
    splits = assign_splits(n, cfg.split_fractions, cfg.seed)
    return ChipDataset(chips, labels, ids, list(cfg.band_names), "multi_label" if multi else "single_label", k, splits)


# -- augmentation ---------------------------------------------------------------------


def random_resized_crop(
    chip: np.ndarray,
    out_size: int,
    rng: np.random.Generator,
    scale: tuple = (0.08, 1.0),
    ratio: tuple = (3 / 4, 4 / 3),
) -> np.ndarray:
    """Crop a random area/aspect window and resize it bilinearly to out_size x out_size."""
    c, h, w = chip.shape
    if h < 1 or w < 1:
        raise ValueError("chip smaller than 1x1")
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    else:
        # fall back to the largest centred window within the ratio bounds
        in_ratio = w / h
        if in_ratio < ratio[0]:
            cw, ch = w, int(round(w / ratio[0]))
        elif in_ratio > ratio[1]:
            ch, cw = h, int(round(h * ratio[1]))
        else:
            cw, ch = w, h
        top, left = (h - ch) // 2, (w - cw) // 2
    return bilinear_resize(chip[:, top : top + ch, left : left + cw], out_size)


def horizontal_flip(chip: np.ndarray, rng: Optional[np.random.Generator] = None, p: float = 0.5) -> np.ndarray:
    """Reverse the width axis with probability p."""
    if p >= 1.0 or (p > 0.0 and rng is not None and rng.uniform() < p):
        return chip[:, :, ::-1].copy()
    return chip


def augment(chip: np.ndarray, out_size: int, rng: np.random.Generator, scale: tuple = (0.08, 1.0)) -> np.ndarray:
    return horizontal_flip(random_resized_crop(chip, out_size, rng, scale), rng)


def resize_for_eval(chip: np.ndarray, out_size: int) -> np.ndarray:
    if chip.shape[1] == out_size and chip.shape[2] == out_size:
        return chip
    return bilinear_resize(chip, out_size)
