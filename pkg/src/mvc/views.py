"""Two channel-disjoint views of a chip.

Three constructions are provided: an L*a*b* split of RGB chips, a fixed
Sentinel-2 band split (short-wavelength visible bands separated from blue),
and a PCA split where view 1 holds the strongest and the weakest components.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import rng_stream
from .tensor import load_array, save_array

log = logging.getLogger(__name__)

LAB_L_SCALE = 1.0 / 100.0
LAB_AB_SCALE = 1.0 / 110.0

SENTINEL2_BANDS = ("2", "3", "4", "5", "6", "7", "8", "8A", "11", "12")
BANDS_VIEW1 = ("2", "8", "8A", "11", "12")
BANDS_VIEW2 = ("3", "4", "5", "6", "7")
# sRGB rendering of a Sentinel-2 chip: red, green, blue
RGB_BANDS = ("4", "3", "2")

# sRGB (D65) linear RGB -> XYZ
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# reference white is the image of sRGB (1, 1, 1), so white maps to exactly (100, 0, 0)
WHITE_XYZ = SRGB_TO_XYZ.sum(axis=1)
CIE_EPSILON = 216.0 / 24389.0
CIE_KAPPA = 24389.0 / 27.0


class ViewError(ValueError):
    pass


@dataclass
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    spec_id: str = ""

    def __post_init__(self):
        if self.view1.shape[-2:] != self.view2.shape[-2:]:
            raise ViewError(f"views disagree on spatial size: {self.view1.shape} vs {self.view2.shape}")

    @property
    def channels(self) -> tuple:
        return self.view1.shape[-3], self.view2.shape[-3]


# -- L*a*b* ---------------------------------------------------------------------


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > CIE_EPSILON, np.cbrt(t), (CIE_KAPPA * t + 16.0) / 116.0)


def rgb_to_lab(chip: np.ndarray) -> np.ndarray:
    """sRGB [3, H, W] in [0, 1] -> L*a*b* [3, H, W] under D65."""
    chip = np.asarray(chip, dtype=np.float64)
    if chip.ndim != 3 or chip.shape[0] != 3:
        raise ViewError(f"rgb_to_lab expects [3, H, W], got {chip.shape}")
    if chip.min() < 0.0 or chip.max() > 1.0:
        raise ViewError("rgb_to_lab input must lie in [0, 1]")
    linear = srgb_to_linear(chip)
    xyz = np.tensordot(SRGB_TO_XYZ, linear, axes=1) / WHITE_XYZ[:, None, None]
    fx, fy, fz = _lab_f(xyz)
    y = xyz[1]
    lightness = np.where(y > CIE_EPSILON, 116.0 * fy - 16.0, CIE_KAPPA * y)
    return np.stack([lightness, 500.0 * (fx - fy), 200.0 * (fy - fz)])


def split_lab(lab: np.ndarray) -> ViewPair:
    """View 1 = L* / 100, view 2 = (a*, b*) / 110."""
    lab = np.asarray(lab)
    if lab.ndim != 3 or lab.shape[0] != 3:
        raise ViewError(f"split_lab expects [3, H, W], got {lab.shape}")
    return ViewPair(lab[:1] * LAB_L_SCALE, lab[1:] * LAB_AB_SCALE, "lab")


# -- fixed band split -------------------------------------------------------------


def normalize_band_name(name) -> str:
    text = str(name).upper()
    return text[1:].lstrip("0") if text.startswith("B") else text


def band_split_indices(band_order: Sequence) -> tuple:
    names = [normalize_band_name(b) for b in band_order]
    if len(names) != len(SENTINEL2_BANDS):
        raise ViewError(f"band split needs exactly {len(SENTINEL2_BANDS)} bands, got {len(names)}")
    unknown = set(names) - set(SENTINEL2_BANDS)
    if unknown:
        raise ViewError(f"unknown band names: {sorted(unknown)}")
    if len(set(names)) != len(names):
        raise ViewError("duplicate band names")
    return [names.index(b) for b in BANDS_VIEW1], [names.index(b) for b in BANDS_VIEW2]


def split_fixed_bands(chip: np.ndarray, band_order: Sequence = SENTINEL2_BANDS) -> ViewPair:
    chip = np.asarray(chip)
    idx1, idx2 = band_split_indices(band_order)
    if chip.shape[0] != len(SENTINEL2_BANDS):
        raise ViewError(f"chip has {chip.shape[0]} channels, band split needs {len(SENTINEL2_BANDS)}")
    return ViewPair(chip[idx1], chip[idx2], "fixed_bands")


# -- PCA --------------------------------------------------------------------------


@dataclass
class PcaBasis:
    mean: np.ndarray
    basis: np.ndarray  # columns are components, strongest first
    eigenvalues: np.ndarray
    rank_deficient: bool = False

    @property
    def num_channels(self) -> int:
        return self.basis.shape[0]

    def orthonormality_error(self) -> float:
        return float(np.abs(self.basis.T @ self.basis - np.eye(self.num_channels)).max())

    def explained_variance_share(self, indices) -> float:
        return float(self.eigenvalues[list(indices)].sum() / self.eigenvalues.sum())


def sample_pixels(chips, pixels_per_chip: int, seed: int) -> np.ndarray:
    """Draw ``pixels_per_chip`` distinct pixel positions from each chip -> [n, C]."""
    rng = rng_stream(seed, "pca")
    samples = []
    for chip in chips:
        c, h, w = chip.shape
        if pixels_per_chip > h * w:
            raise ViewError(f"cannot sample {pixels_per_chip} pixels from a {h}x{w} chip")
        flat = np.asarray(chip, dtype=np.float64).reshape(c, h * w)
        samples.append(flat[:, rng.choice(h * w, size=pixels_per_chip, replace=False)].T)
    return np.concatenate(samples)


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.abs(vectors).argmax(axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def pca_from_pixels(pixels: np.ndarray) -> PcaBasis:
    pixels = np.asarray(pixels, dtype=np.float64)
    mean = pixels.mean(axis=0)
    cov = np.cov(pixels - mean, rowvar=False)
    eigenvalues, vectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues, vectors = eigenvalues[order], fix_signs(vectors[:, order])
    deficient = bool(eigenvalues.min() < 1e-10)
    if deficient:
        msg = f"rank-deficient pixel covariance: smallest eigenvalue {eigenvalues.min():.3g}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        log.warning(msg)
    return PcaBasis(mean, vectors, eigenvalues, deficient)


def pca_fit(chips, pixels_per_chip: int = 144, seed: int = 0) -> PcaBasis:
    """Fit a PCA basis to pixels sampled from a collection of [C, H, W] chips."""
    chips = list(chips)
    if len(chips) < 2:
        raise ViewError("pca_fit needs at least two chips")
    return pca_from_pixels(sample_pixels(chips, pixels_per_chip, seed))


def pca_partition(eigenvalues: Sequence[float]) -> tuple:
    """View 1 = strongest component plus the floor(C/2) - 1 weakest; view 2 = the rest.

    For C = 10 this is {0, 6, 7, 8, 9} / {1, ..., 5}.
    """
    c = len(eigenvalues)
    if c < 3:
        raise ViewError(f"pca_partition needs at least 3 components, got {c}")
    if np.any(np.diff(np.asarray(eigenvalues, dtype=float)) > 0):
        raise ViewError("eigenvalues must be sorted in descending order")
    n_low = c // 2 - 1
    view1 = [0] + list(range(c - n_low, c))
    view2 = [i for i in range(c) if i not in view1]
    return view1, view2


# -- view specs ---------------------------------------------------------------------


@dataclass
class ViewSpec:
    kind: str  # lab | fixed_bands | pca
    channels_view1: list
    channels_view2: list
    band_names: list = field(default_factory=list)
    band_mean: Optional[np.ndarray] = None
    band_std: Optional[np.ndarray] = None
    pca: Optional[PcaBasis] = None

    KINDS = ("lab", "fixed_bands", "pca")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ViewError(f"unknown view kind {self.kind!r}")
        self.channels_view1 = [int(i) for i in self.channels_view1]
        self.channels_view2 = [int(i) for i in self.channels_view2]
        both = set(self.channels_view1) | set(self.channels_view2)
        if set(self.channels_view1) & set(self.channels_view2):
            raise ViewError("view channel sets overlap")
        if both != set(range(len(both))):
            raise ViewError("view channel sets do not cover the transformed channels")
        if self.kind == "pca":
            if self.pca is None:
                raise ViewError("pca view spec needs a fitted basis")
            if self.pca.orthonormality_error() > 1e-6:
                raise ViewError("pca basis is not orthonormal")
            if np.any(np.diff(self.pca.eigenvalues) > 0):
                raise ViewError("pca eigenvalues are not sorted descending")

    @property
    def spec_id(self) -> str:
        return {"lab": "lab", "fixed_bands": "bands", "pca": "pca"}[self.kind]

    @property
    def view_channels(self) -> tuple:
        return len(self.channels_view1), len(self.channels_view2)

    def to_json(self, path) -> None:
        path = Path(path)
        doc = {
            "kind": self.kind,
            "channels_view1": self.channels_view1,
            "channels_view2": self.channels_view2,
            "band_names": self.band_names,
        }
        stem = path.parent / path.stem
        if self.band_mean is not None:
            save_array(f"{stem}.band_mean", self.band_mean)
            save_array(f"{stem}.band_std", self.band_std)
            doc["band_stats"] = {"mean": f"{path.stem}.band_mean", "std": f"{path.stem}.band_std"}
        if self.pca is not None:
            for name in ("mean", "basis", "eigenvalues"):
                save_array(f"{stem}.pca_{name}", getattr(self.pca, name))
            doc["pca"] = {name: f"{path.stem}.pca_{name}" for name in ("mean", "basis", "eigenvalues")}
            doc["pca"]["rank_deficient"] = self.pca.rank_deficient
        path.write_text(json.dumps(doc, indent=2))

    @classmethod
    def from_json(cls, path) -> "ViewSpec":
        path = Path(path)
        doc = json.loads(path.read_text())
        root = path.parent
        band_mean = band_std = pca = None
        if "band_stats" in doc:
            band_mean = load_array(root / doc["band_stats"]["mean"])
            band_std = load_array(root / doc["band_stats"]["std"])
        if "pca" in doc:
            p = doc["pca"]
            pca = PcaBasis(
                load_array(root / p["mean"]),
                load_array(root / p["basis"]),
                load_array(root / p["eigenvalues"]),
                bool(p.get("rank_deficient", False)),
            )
        return cls(
            doc["kind"], doc["channels_view1"], doc["channels_view2"], doc.get("band_names", []),
            band_mean, band_std, pca,
        )


def lab_spec(band_names: Sequence = RGB_BANDS) -> ViewSpec:
    """L*a*b* views; ``band_names`` name the chip's red, green and blue bands."""
    return ViewSpec("lab", [0], [1, 2], [normalize_band_name(b) for b in band_names])


def fixed_band_spec(band_stats: Optional[tuple] = None, band_order: Sequence = SENTINEL2_BANDS) -> ViewSpec:
    """Band split; ``band_stats`` = (mean, std) per band of ``band_order``."""
    idx1, idx2 = band_split_indices(band_order)
    names = [normalize_band_name(b) for b in band_order]
    mean = std = None
    if band_stats is not None:
        mean, std = (np.asarray(a, dtype=np.float64) for a in band_stats)
    return ViewSpec("fixed_bands", idx1, idx2, names, mean, std)


def pca_spec(basis: PcaBasis, band_names: Sequence = ()) -> ViewSpec:
    idx1, idx2 = pca_partition(basis.eigenvalues)
    return ViewSpec("pca", idx1, idx2, [normalize_band_name(b) for b in band_names], pca=basis)


def band_statistics(chips) -> tuple:
    """Per-band mean and standard deviation over all pixels of ``chips``."""
    total = count = 0
    sq = 0
    for chip in chips:
        chip = np.asarray(chip, dtype=np.float64)
        total = total + chip.sum(axis=(1, 2))
        sq = sq + (chip * chip).sum(axis=(1, 2))
        count += chip.shape[1] * chip.shape[2]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean * mean, 0.0))
    return mean, np.maximum(std, 1e-8)


def rgb_from_bands(chip: np.ndarray, band_names: Sequence, rgb_bands: Sequence = RGB_BANDS) -> np.ndarray:
    """Pick the red, green and blue bands of a multiband chip and clamp to [0, 1]."""
    names = [normalize_band_name(b) for b in band_names]
    try:
        idx = [names.index(normalize_band_name(b)) for b in rgb_bands]
    except ValueError:
        raise ViewError(f"chip bands {names} lack one of the RGB bands {list(rgb_bands)}") from None
    return np.clip(np.asarray(chip)[idx], 0.0, 1.0)


def apply_view_spec(chip: np.ndarray, spec: ViewSpec, band_names: Optional[Sequence] = None) -> ViewPair:
    """Transform one chip [C, H, W] into its two views.

    Lab specs accept an RGB chip directly, or any multiband chip together with
    its ``band_names`` (the RGB bands named by the view spec are extracted and clamped).
    """
    chip = np.asarray(chip)
    if spec.kind == "lab":
        if chip.shape[0] != 3 or band_names is not None:
            if band_names is None:
                raise ViewError(f"lab views need an RGB chip, got {chip.shape[0]} channels")
            chip = rgb_from_bands(chip, band_names, spec.band_names or RGB_BANDS)
        return split_lab(rgb_to_lab(chip))
    if spec.kind == "fixed_bands":
        if chip.shape[0] != len(spec.band_names):
            raise ViewError(f"chip has {chip.shape[0]} channels, spec expects {len(spec.band_names)}")
        if band_names is not None and [normalize_band_name(b) for b in band_names] != spec.band_names:
            raise ViewError(f"chip band order {list(band_names)} differs from spec {spec.band_names}")
        x = np.asarray(chip, dtype=np.float64)
        if spec.band_mean is not None:
            x = (x - spec.band_mean[:, None, None]) / spec.band_std[:, None, None]
        return ViewPair(x[spec.channels_view1], x[spec.channels_view2], spec.spec_id)
    basis = spec.pca
    if chip.shape[0] != basis.num_channels:
        raise ViewError(f"chip has {chip.shape[0]} channels, pca basis expects {basis.num_channels}")
    c, h, w = chip.shape
    centered = np.asarray(chip, dtype=np.float64).reshape(c, -1) - basis.mean[:, None]
    scale = 1.0 / np.sqrt(np.maximum(basis.eigenvalues, 1e-10))
    comps = (basis.basis.T @ centered) * scale[:, None]
    comps = comps.reshape(c, h, w)
    return ViewPair(comps[spec.channels_view1], comps[spec.channels_view2], spec.spec_id)


def apply_view_spec_batch(chips, spec: ViewSpec, band_names=None, dtype=np.float32) -> tuple:
    """[N, C, H, W] -> (view1 [N, C1, H, W], view2 [N, C2, H, W])."""
    chips = np.asarray(chips)
    n, c, h, w = chips.shape
    # every transform is per pixel, so the batch can be stacked along the height axis
    tall = chips.transpose(1, 0, 2, 3).reshape(c, n * h, w)
    pair = apply_view_spec(tall, spec, band_names)

    def unstack(v):
        return np.ascontiguousarray(v.reshape(v.shape[0], n, h, w).transpose(1, 0, 2, 3), dtype=dtype)

    return unstack(pair.view1), unstack(pair.view2)
