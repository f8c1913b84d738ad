"""Segmentation metrics: Dice, average symmetric surface distance, symmetric 95% Hausdorff.

Surfaces are the foreground voxels with at least one 6-connected background
neighbor (voxels outside the grid count as background).  All distances are
in millimetres between voxel centers.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DegenerateMaskError, GeometryMismatchError
from .volume import LabelVolume, check_geometry

log = logging.getLogger(__name__)

_SIX = ndimage.generate_binary_structure(3, 1)


def _labels(mask) -> np.ndarray:
    return (mask.labels if isinstance(mask, LabelVolume) else np.asarray(mask)).astype(bool)


def dsc(pred, truth) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both are empty."""
    if isinstance(pred, LabelVolume) and isinstance(truth, LabelVolume):
        check_geometry(pred, truth)
    p, g = _labels(pred), _labels(truth)
    if p.shape != g.shape:
        raise GeometryMismatchError(f"extents differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def surface_mask(mask) -> np.ndarray:
    m = _labels(mask)
    return m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)


def extract_surface(mask, spacing=None) -> np.ndarray:
    """(K, 3) array of surface voxel centers in mm."""
    if isinstance(mask, LabelVolume):
        spacing = mask.spacing
    spacing = np.asarray(spacing if spacing is not None else (1.0, 1.0, 1.0), np.float64)
    m = _labels(mask)
    if not m.any() or m.all():
        raise DegenerateMaskError("degenerate mask: surface needs both labels present")
    return np.argwhere(surface_mask(m)) * spacing


def directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest neighbor in ``dst``."""
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("surface distance needs two nonempty point sets")
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def _pooled(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([directed_distances(a, b), directed_distances(b, a)])


def assd(pred_surface: np.ndarray, truth_surface: np.ndarray) -> float:
    """Mean of both directed nearest-neighbor distance sets, pooled."""
    return float(_pooled(pred_surface, truth_surface).mean())


def hd95(pred_surface: np.ndarray, truth_surface: np.ndarray) -> float:
    """95th percentile (linear interpolation) of the pooled directed distances."""
    return float(np.percentile(_pooled(pred_surface, truth_surface), 95, method="linear"))


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    assd: float = math.nan  # nan: undefined (an empty mask)
    hd95: float = math.nan

    @property
    def surface_defined(self) -> bool:
        return not (math.isnan(self.assd) or math.isnan(self.hd95))


@dataclass
class MetricReport:
    cases: list[CaseMetrics] = field(default_factory=list)
    mean: dict[str, float] = field(default_factory=dict)
    sd: dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "dsc", "assd_mm", "hd95_mm"])
        for c in self.cases:
            w.writerow([c.case_id, _fmt(c.dsc), _fmt(c.assd), _fmt(c.hd95)])
        for tag, d in (("mean", self.mean), ("sd", self.sd)):
            w.writerow([tag, _fmt(d.get("dsc")), _fmt(d.get("assd")), _fmt(d.get("hd95"))])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "undefined"
    return repr(float(v))


def evaluate_case(pred, truth, case_id: str = "case") -> CaseMetrics:
    """DSC, ASSD and 95HD of one prediction; surface metrics are NaN if either mask is empty."""
    score = dsc(pred, truth)
    spacing = truth.spacing if isinstance(truth, LabelVolume) else (1.0, 1.0, 1.0)
    p, g = _labels(pred), _labels(truth)
    if not p.any() or not g.any() or p.all() or g.all():
        log.warning("case %s: surface metrics undefined (empty or full mask)", case_id)
        return CaseMetrics(case_id, score)
    ps, gs = extract_surface(p, spacing), extract_surface(g, spacing)
    pooled = _pooled(ps, gs)
    return CaseMetrics(case_id, score, float(pooled.mean()),
                       float(np.percentile(pooled, 95, method="linear")))


def aggregate(cases: Sequence[CaseMetrics]) -> MetricReport:
    """Mean and population SD across cases; undefined surface metrics are skipped."""
    if not cases:
        raise ValueError("aggregate needs at least one case")
    cases = sorted(cases, key=lambda c: str(c.case_id))
    mean, sd = {}, {}
    for key in ("dsc", "assd", "hd95"):
        vals = np.array([getattr(c, key) for c in cases], np.float64)
        vals = vals[~np.isnan(vals)]
        if len(vals) < len(cases):
            log.warning("%s: %d undefined case(s) excluded", key, len(cases) - len(vals))
        mean[key] = float(vals.mean()) if len(vals) else math.nan
        sd[key] = float(vals.std()) if len(vals) else math.nan
    return MetricReport(list(cases), mean, sd)
