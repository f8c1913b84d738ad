"""CT preprocessing: HU clamping, window normalization, resampling, patching."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .volume import LabelVolume, Volume, check_geometry


@dataclass
class PreprocessConfig:
    hu_min: float = -200.0
    hu_max: float = 800.0
    target_spacing: tuple[float, float, float] = (0.8, 0.8, 0.8)  # mm
    patch_size: int = 64  # voxels per axis
    patch_overlap: int = 0  # voxels, inference tiling only
    foreground_prob: float = 0.5

    def __post_init__(self):
        if not self.hu_min < self.hu_max:
            raise ConfigError(f"hu_min ({self.hu_min}) must be below hu_max ({self.hu_max})")
        if self.patch_size <= 0 or self.patch_size % 8:
            raise ConfigError(f"patch_size must be a positive multiple of 8, got {self.patch_size}")
        if not 0 <= self.patch_overlap < self.patch_size:
            raise ConfigError(f"patch_overlap must be in [0, patch_size), got {self.patch_overlap}")
        if any(s <= 0 for s in self.target_spacing):
            raise ConfigError(f"target_spacing must be positive, got {self.target_spacing}")
        if not 0.0 <= self.foreground_prob <= 1.0:
            raise ConfigError("foreground_prob must be in [0, 1]")


def clamp_and_window(volume: Volume, cfg: PreprocessConfig) -> Volume:
    """Clamp to [hu_min, hu_max] and map that range affinely onto [0, 1]."""
    lo, hi = float(cfg.hu_min), float(cfg.hu_max)
    v = np.clip(volume.data.astype(np.float64), lo, hi)
    return Volume(((v - lo) / (hi - lo)).astype(np.float32), volume.spacing)


def _axis_weights(n_in: int, n_out: int, scale: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-voxel aligned source coordinate of each output voxel
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resample(volume, target_spacing: Sequence[float], mode: str = "trilinear"):
    """Resample to ``target_spacing`` mm.

    New extents are ``round(n * old / new)``.  Use ``trilinear`` for
    intensities and ``nearest`` for labels; a LabelVolume always gets nearest.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or any(not t > 0 for t in target):
        raise ValueError(f"target spacing must be 3 positive values, got {target_spacing}")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    is_label = isinstance(volume, LabelVolume)
    if is_label:
        mode = "nearest"
    if tuple(volume.spacing) == target:
        return type(volume)(volume.data.copy(), target)

    out = volume.data.astype(np.float64) if not is_label else volume.data
    for ax, (n, s, t) in enumerate(zip(volume.extents, volume.spacing, target)):
        n_out = max(1, int(round(n * s / t)))
        lo, hi, frac = _axis_weights(n, n_out, t / s)
        if mode == "nearest":
            idx = np.where(frac >= 0.5, hi, lo)
            out = np.take(out, idx, axis=ax)
        else:
            shape = [1] * 3
            shape[ax] = n_out
            f = frac.reshape(shape)
            out = np.take(out, lo, axis=ax) * (1.0 - f) + np.take(out, hi, axis=ax) * f
    if is_label:
        return LabelVolume(out.astype(np.uint8), target)
    return Volume(out.astype(np.float32), target)


def preprocess_volume(volume: Volume, cfg: PreprocessConfig) -> Volume:
    return resample(clamp_and_window(volume, cfg), cfg.target_spacing, "trilinear")


def preprocess_pair(volume: Volume, label: LabelVolume, cfg: PreprocessConfig) -> tuple[Volume, LabelVolume]:
    check_geometry(volume, label)
    return preprocess_volume(volume, cfg), resample(label, cfg.target_spacing, "nearest")


# -- patches ---------------------------------------------------------------------------

class Patch(NamedTuple):
    data: np.ndarray
    label: np.ndarray | None
    origin: tuple[int, int, int]


def _check_fits(extents, p):
    for ax, n in enumerate(extents):
        if n < p:
            raise ShapeError(
                f"axis {ax}: volume extent {n} is smaller than patch size {p}; pad the volume first "
                f"(see pad_to_patch)", axis=ax)


def tile_origins(extents: Sequence[int], patch: int, overlap: int = 0) -> list[tuple[int, int, int]]:
    """Patch origins covering every voxel; the last tile on each axis is flush with the edge."""
    _check_fits(extents, patch)
    step = patch - overlap
    per_axis = []
    for n in extents:
        starts = list(range(0, n - patch + 1, step))
        if starts[-1] + patch < n:
            starts.append(n - patch)
        per_axis.append(starts)
    return list(itertools.product(*per_axis))


def pad_to_patch(volume: Volume, patch: int) -> tuple[Volume, tuple[int, int, int]]:
    """Edge-pad so every axis is at least ``patch`` voxels and a multiple of 8."""
    target = [max(patch, int(math.ceil(n / 8) * 8)) for n in volume.extents]
    pads = [(0, t - n) for t, n in zip(target, volume.extents)]
    if not any(p for _, p in pads):
        return volume, volume.extents
    return Volume(np.pad(volume.data, pads, mode="edge"), volume.spacing), volume.extents


def extract_patches(volume: Volume, label: LabelVolume | None, cfg: PreprocessConfig, seed: int = 0,
                    mode: str = "train", count: int | None = None) -> Iterator[Patch]:
    """Yield patches from a preprocessed volume.

    ``mode="train"``: random origins; with probability ``cfg.foreground_prob``
    the patch is centered near a random foreground voxel (uniform if the
    label has none).  Stops after ``count`` patches, or never if None.
    ``mode="inference"``: the deterministic tiling of :func:`tile_origins`.
    """
    p = cfg.patch_size
    _check_fits(volume.extents, p)
    if label is not None:
        check_geometry(volume, label)
    lab = None if label is None else label.labels

    def cut(o):
        sl = tuple(slice(a, a + p) for a in o)
        return Patch(volume.data[sl], None if lab is None else lab[sl], tuple(int(a) for a in o))

    if mode == "inference":
        for o in tile_origins(volume.extents, p, cfg.patch_overlap):
            yield cut(o)
        return
    if mode != "train":
        raise ValueError(f"unknown patch mode {mode!r}")

    rng = np.random.default_rng(seed)
    fg = np.argwhere(lab > 0) if lab is not None else np.empty((0, 3), int)
    hi = np.asarray(volume.extents) - p
    produced = 0
    while count is None or produced < count:
        if len(fg) and rng.random() < cfg.foreground_prob:
            voxel = fg[rng.integers(len(fg))]
            origin = np.clip(voxel - rng.integers(0, p, size=3), 0, hi)
        else:
            origin = np.array([rng.integers(0, h + 1) for h in hi])
        yield cut(origin)
        produced += 1


def stitch_patches(patch_predictions: Sequence[np.ndarray], origins: Sequence[Sequence[int]],
                   full_extents: Sequence[int]) -> np.ndarray:
    """Average overlapping (C, p, p, p) probability patches into a (C, D, H, W) volume."""
    if not patch_predictions:
        raise ValueError("no patches to stitch")
    c = patch_predictions[0].shape[0]
    acc = np.zeros((c, *full_extents), np.float64)
    weight = np.zeros(tuple(full_extents), np.int32)
    for pred, o in zip(patch_predictions, origins):
        sl = tuple(slice(a, a + n) for a, n in zip(o, pred.shape[1:]))
        acc[(slice(None),) + sl] += pred
        weight[sl] += 1
    if (weight == 0).any():
        missing = np.argwhere(weight == 0)[0]
        raise ShapeError(f"voxel {tuple(missing)} is not covered by any patch")
    return (acc / weight).astype(np.float32)


def probabilities_to_labels(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=0).astype(np.uint8)
