"""Signed distance maps and the segmentation training losses.

The surface loss weights the predicted foreground probability of each voxel
by its signed distance to the ground-truth boundary (negative inside the
bone, positive outside), so probability mass far outside the bone costs the
most and mass deep inside is rewarded.  It is paired with a soft Dice loss:
``L = L_surface + lambda * L_dice``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateMaskError, ShapeError
from .tensor import Tensor
from .volume import LabelVolume, Volume


@dataclass
class LossConfig:
    lam: float = 1.0  # weight of the Dice term
    surface_reduction: str = "mean"  # "mean" over voxels or raw "sum"
    dice_smooth: float = 1e-5

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.dice_smooth <= 0:
            raise ConfigError("dice_smooth must be > 0")
        if self.surface_reduction not in ("mean", "sum"):
            raise ConfigError(f"surface_reduction must be 'mean' or 'sum', got {self.surface_reduction!r}")


@dataclass
class SignedDistanceField:
    """Per-voxel signed distance in mm: negative on foreground, positive on background."""

    phi: np.ndarray
    spacing: tuple[float, float, float]

    @property
    def extents(self):
        return self.phi.shape

    def to_volume(self) -> Volume:
        return Volume(self.phi.astype(np.float32), self.spacing)


# -- exact Euclidean distance transform ------------------------------------------------

def _lower_envelope_1d(f: np.ndarray, step: float) -> np.ndarray:
    """Squared-distance transform along the last axis, all lines at once.

    Computes ``d[q] = min_p (step*(q-p))^2 + f[p]`` with the lower envelope
    of parabolas (Felzenszwalb & Huttenlocher), vectorized over leading
    axes.  ``inf`` entries of ``f`` contribute no parabola.
    """
    lead = f.shape[:-1]
    n = f.shape[-1]
    f = f.reshape(-1, n)
    m = f.shape[0]
    rows = np.arange(m)
    pos = np.arange(n) * step
    pos2 = pos ** 2

    v = np.zeros((m, n), np.int64)
    z = np.full((m, n + 1), np.inf)
    k = np.full(m, -1, np.int64)
    for q in range(n):
        fq = f[:, q]
        live = np.isfinite(fq)
        if not live.any():
            continue
        first = live & (k < 0)
        k[first] = 0
        v[first, 0] = q
        z[first, 0] = -np.inf
        z[first, 1] = np.inf
        todo = rows[live & ~first]
        while todo.size:
            kk = k[todo]
            vk = v[todo, kk]
            s = ((fq[todo] + pos2[q]) - (f[todo, vk] + pos2[vk])) / (2.0 * (pos[q] - pos[vk]))
            pop = s <= z[todo, kk]
            # pop the hull top while the new parabola hides it; z[.,0] = -inf stops at k == 0
            k[todo[pop]] -= 1
            done = todo[~pop]
            kd = k[done] + 1
            k[done] = kd
            v[done, kd] = q
            z[done, kd] = s[~pop]
            z[done, kd + 1] = np.inf
            todo = todo[pop]

    out = np.full((m, n), np.inf)
    has = k >= 0
    j = np.zeros(m, np.int64)
    for q in range(n):
        while True:
            adv = has & (z[rows, j + 1] < pos[q])
            if not adv.any():
                break
            j[adv] += 1
        vj = v[rows, j]
        out[has, q] = (pos[q] - pos[vj[has]]) ** 2 + f[rows[has], vj[has]]
    return out.reshape(*lead, n)


def squared_distance_to(features: np.ndarray, spacing) -> np.ndarray:
    """Squared mm distance from every voxel to the nearest ``True`` voxel center."""
    f = np.where(features, 0.0, np.inf)
    for ax in range(features.ndim):
        f = np.moveaxis(_lower_envelope_1d(np.moveaxis(f, ax, -1), float(spacing[ax])), -1, ax)
    return f


def signed_distance(mask: LabelVolume | np.ndarray, spacing=None) -> SignedDistanceField:
    """Signed distance to the opposite label, in mm.

    Background voxels get the distance to the nearest foreground voxel
    center; foreground voxels get minus the distance to the nearest
    background voxel center.
    """
    if isinstance(mask, LabelVolume):
        labels, spacing = mask.labels, mask.spacing
    else:
        labels = np.asarray(mask)
        spacing = (1.0, 1.0, 1.0) if spacing is None else tuple(float(s) for s in spacing)
    fg = labels.astype(bool)
    if fg.all() or not fg.any():
        raise DegenerateMaskError("degenerate mask: need both foreground and background voxels")
    outside = np.sqrt(squared_distance_to(fg, spacing))
    inside = np.sqrt(squared_distance_to(~fg, spacing))
    phi = np.where(fg, -inside, outside)
    return SignedDistanceField(phi, tuple(spacing))


# -- losses -------------------------------------------------------------------------------

def _foreground(prediction: Tensor, extents) -> Tensor:
    """Foreground channel (N, D, H, W) of an (N, 2, D, H, W) probability tensor."""
    if prediction.ndim != 5 or prediction.shape[1] < 2:
        raise ShapeError(f"prediction must be (N, C>=2, D, H, W), got {prediction.shape}")
    if tuple(prediction.shape[2:]) != tuple(extents):
        raise ShapeError(f"prediction extents {prediction.shape[2:]} != target extents {tuple(extents)}")
    return prediction[:, 1]


def _phi_array(sdf) -> np.ndarray:
    """Stack one SDF (shared by the batch) or a list of SDFs into (N|1, D, H, W)."""
    if isinstance(sdf, SignedDistanceField):
        return sdf.phi[None]
    if isinstance(sdf, np.ndarray):
        return sdf if sdf.ndim == 4 else sdf[None]
    return np.stack([s.phi for s in sdf])


def surface_loss(prediction: Tensor, sdf, cfg: LossConfig | None = None) -> Tensor:
    """sum_q phi(q) * s(q), or its mean over voxels (default)."""
    cfg = cfg or LossConfig()
    phi = _phi_array(sdf)
    s = _foreground(prediction, phi.shape[1:])
    if phi.shape[0] not in (1, s.shape[0]):
        raise ShapeError(f"{phi.shape[0]} distance maps for a batch of {s.shape[0]}", axis=0)
    total = (s * Tensor(phi.astype(prediction.dtype))).sum()
    if cfg.surface_reduction == "mean":
        total = total * (1.0 / s.size)
    return total


def _target_array(target) -> np.ndarray:
    if isinstance(target, LabelVolume):
        return target.labels[None]
    if isinstance(target, (list, tuple)):
        return np.stack([t.labels if isinstance(t, LabelVolume) else np.asarray(t) for t in target])
    t = np.asarray(target)
    return t if t.ndim == 4 else t[None]


def dice_loss(prediction: Tensor, target, cfg: LossConfig | None = None) -> Tensor:
    """1 - (2 sum(s g) + eps) / (sum(s) + sum(g) + eps) on the foreground channel, batch-pooled."""
    cfg = cfg or LossConfig()
    g = _target_array(target)
    s = _foreground(prediction, g.shape[1:])
    if g.shape[0] != s.shape[0]:
        raise ShapeError(f"{g.shape[0]} targets for a batch of {s.shape[0]}", axis=0)
    gt = Tensor(g.astype(prediction.dtype))
    eps = cfg.dice_smooth
    inter = (s * gt).sum()
    return 1.0 - (inter * 2.0 + eps) / (s.sum() + float(g.sum()) + eps)


def combined_loss(prediction: Tensor, target, sdf, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    loss = surface_loss(prediction, sdf, cfg)
    if cfg.lam:
        loss = loss + dice_loss(prediction, target, cfg) * cfg.lam
    return loss
