"""Volumes with physical spacing, the VOL1 container, and synthetic fractured bone.

Extents and spacing are always listed in array axis order ``(D, H, W)``;
voxel ``(i, j, k)`` has its center at ``(i*sd, j*sh, k*sw)`` millimetres.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (BadMagicError, GeometryMismatchError, InfeasibleSpecError,
                     InvalidSpacingError, TruncatedPayloadError, VolumeFormatError)

VOLUME_MAGIC = "VOL1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise InvalidSpacingError(f"spacing needs 3 values, got {sp}")
    if not all(math.isfinite(s) and s > 0 for s in sp):
        raise InvalidSpacingError(f"spacing must be positive, got {sp}")
    return sp


@dataclass
class Volume:
    """Scalar intensity grid (float32) with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelVolume:
    """Binary mask: 0 background, 1 bone."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"label data must be 3-D, got shape {labels.shape}")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        self.labels = labels.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def data(self) -> np.ndarray:
        return self.labels


def check_geometry(a, b):
    """Raise unless the two volumes share extents and spacing."""
    if tuple(a.extents) != tuple(b.extents):
        raise GeometryMismatchError(f"extents differ: {a.extents} vs {b.extents}")
    if tuple(a.spacing) != tuple(b.spacing):
        raise GeometryMismatchError(f"spacing differs: {a.spacing} vs {b.spacing}")


# -- VOL1 container ---------------------------------------------------------------

def write_volume(volume: Volume | LabelVolume, path):
    """Write ``VOL1 <dtype> <D> <H> <W> <s_d> <s_h> <s_w>`` plus a raw payload."""
    if isinstance(volume, LabelVolume):
        tag, payload = "u8", volume.labels.astype("u1")
    else:
        tag, payload = "f32", volume.data.astype("<f4")
    d, h, w = volume.extents
    header = " ".join([VOLUME_MAGIC, tag, str(d), str(h), str(w)] + [repr(float(s)) for s in volume.spacing])
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(payload).tobytes())


def read_volume(path) -> Volume | LabelVolume:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    head = raw[:nl if nl >= 0 else 64].decode("ascii", errors="replace").split()
    if not head or head[0] != VOLUME_MAGIC:
        raise BadMagicError(f"{path}: not a VOL1 file (magic {head[:1]!r})")
    if nl < 0 or len(head) != 8 or head[1] not in _DTYPES:
        raise VolumeFormatError(f"{path}: malformed VOL1 header {head!r}")
    try:
        extents = tuple(int(v) for v in head[2:5])
        spacing = tuple(float(v) for v in head[5:8])
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: malformed VOL1 header {head!r}") from exc
    spacing = _check_spacing(spacing)
    dtype = _DTYPES[head[1]]
    count = int(np.prod(extents))
    payload = raw[nl + 1:]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedPayloadError(
            f"{path}: truncated payload ({len(payload)} of {count * dtype.itemsize} bytes)")
    arr = np.frombuffer(payload[:count * dtype.itemsize], dtype=dtype).reshape(extents)
    if head[1] == "u8":
        return LabelVolume(arr.copy(), spacing)
    return Volume(arr.astype(np.float32), spacing)


# -- synthetic fractured bone ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters of the synthetic fractured-bone generator.

    Intensity levels are in normalized [0, 1] units.  When ``hu_range`` is
    set, the volume is emitted in HU by inverting the window mapping, so
    that the preprocessing pipeline recovers the normalized levels.
    """

    seed: int = 0
    extents: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (0.8, 0.8, 0.8)
    n_bodies: int = 2
    radius_range: tuple[float, float] = (7.0, 12.0)  # mm
    n_gaps: int = 2
    gap_width_range: tuple[float, float] = (1.6, 3.2)  # mm
    shell_thickness: float = 1.6  # mm
    bone_level: float = 0.9
    cancellous_level: float = 0.45
    soft_tissue_level: float = 0.4
    noise_sigma: float = 0.05
    hu_range: tuple[float, float] | None = (-200.0, 800.0)

    def validate(self):
        _check_spacing(self.spacing)
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise InfeasibleSpecError(f"radius range {self.radius_range} must satisfy 0 < min <= max")
        phys = [(n - 1) * s for n, s in zip(self.extents, self.spacing)]
        if 2 * hi >= min(phys):
            raise InfeasibleSpecError(
                f"max radius {hi} mm does not fit in a volume of {min(phys):.1f} mm")
        if self.n_bodies < 1:
            raise InfeasibleSpecError("need at least one bone body")
        if self.n_gaps < 0:
            raise InfeasibleSpecError("gap count must be >= 0")
        if self.n_gaps:
            glo, ghi = self.gap_width_range
            if glo < max(self.spacing) - 1e-9 or ghi < glo:
                raise InfeasibleSpecError(
                    f"gap widths {self.gap_width_range} mm must be >= one voxel ({max(self.spacing)} mm)")
        if self.noise_sigma < 0:
            raise InfeasibleSpecError("noise sigma must be >= 0")


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def generate_synthetic(spec: SyntheticSpec) -> tuple[Volume, LabelVolume]:
    """Ellipsoidal bones with a bright cortical shell, cut by planar fracture gaps.

    Gaps are cut after the shell is laid down, so fracture faces expose the
    dim cancellous interior, which is close to the soft-tissue level.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sp = np.asarray(spec.spacing)
    grid = np.stack(np.meshgrid(*[np.arange(n) * s for n, s in zip(spec.extents, sp)], indexing="ij"), -1)
    phys = np.asarray(spec.extents) * sp

    label = np.zeros(spec.extents, bool)
    shell = np.zeros(spec.extents, bool)
    bodies = []
    for _ in range(spec.n_bodies):
        radii = rng.uniform(*spec.radius_range, size=3)
        rot = _random_rotation(rng)
        margin = radii.max()
        center = rng.uniform(margin, phys - sp - margin)
        local = (grid - center) @ rot
        rho = np.sqrt(((local / radii) ** 2).sum(-1))
        body = rho <= 1.0
        body_shell = body & (rho > 1.0 - spec.shell_thickness / radii.min())
        bodies.append((center, radii, body, body_shell))

    cut = [np.zeros(spec.extents, bool) for _ in bodies]
    for g in range(spec.n_gaps):
        b = g % len(bodies)
        center, radii, _, _ = bodies[b]
        normal = rng.standard_normal(3)
        normal /= np.linalg.norm(normal)
        offset = rng.uniform(-0.3, 0.3) * radii.min()
        width = rng.uniform(*spec.gap_width_range)
        cut[b] |= np.abs((grid - center) @ normal - offset) < width / 2.0

    for (_, _, body, body_shell), c in zip(bodies, cut):
        label |= body & ~c
        shell |= body_shell & ~c

    norm = np.full(spec.extents, spec.soft_tissue_level, np.float64)
    norm[label] = spec.cancellous_level
    norm[shell & label] = spec.bone_level
    norm += rng.normal(0.0, spec.noise_sigma, size=spec.extents)
    if spec.hu_range is not None:
        lo, hi = spec.hu_range
        norm = lo + norm * (hi - lo)
    return Volume(norm.astype(np.float32), spec.spacing), LabelVolume(label.astype(np.uint8), spec.spacing)


# -- dataset split -------------------------------------------------------------------

def split_dataset(ids: Sequence, ratio: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Shuffle ``ids`` by ``seed`` and cut it into (train, test).

    The training share is ``ceil(n * ratio)``, so 103 cases at 0.8 give an
    83/20 split.
    """
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    n_train = math.ceil(len(ids) * ratio - 1e-9)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]
