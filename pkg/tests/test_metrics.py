import logging

import numpy as np
import pytest

from csaseg.errors import DegenerateMaskError, GeometryMismatchError
from csaseg.metrics import (CaseMetrics, aggregate, assd, dsc, evaluate_case, extract_surface, hd95)
from csaseg.volume import LabelVolume

from oracles import directed_distances_naive, percentile_linear, surface_points_naive


def random_mask(rng, shape=(12, 12, 12)):
    m = np.zeros(shape, np.uint8)
    lo = rng.integers(0, 5, size=3)
    hi = lo + rng.integers(3, 8, size=3)
    m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    m ^= (rng.random(shape) < 0.05).astype(np.uint8)
    if m.all() or not m.any():
        m.flat[0] ^= 1
    return m


def test_dsc_counts():
    a = np.zeros((4, 4, 4), np.uint8)
    b = np.zeros((4, 4, 4), np.uint8)
    a[0, :2, :] = 1  # 8 voxels
    b[0, 1:3, :] = 1  # 8 voxels, 4 shared
    assert dsc(a, b) == 0.5
    assert dsc(a, a) == 1.0
    c = np.zeros_like(a)
    c[3, 3, :] = 1
    assert dsc(a, c) == 0.0
    assert dsc(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_dsc_geometry_mismatch():
    with pytest.raises(GeometryMismatchError):
        dsc(LabelVolume(np.ones((2, 2, 2)), (1, 1, 1)), LabelVolume(np.ones((2, 2, 2)), (1, 1, 2)))


def test_surface_single_voxel_and_cube():
    m = np.zeros((5, 5, 5), np.uint8)
    m[2, 2, 2] = 1
    assert len(extract_surface(m)) == 1
    m[1:4, 1:4, 1:4] = 1
    pts = extract_surface(m)
    assert len(pts) == 26
    assert not (pts == [2.0, 2.0, 2.0]).all(axis=1).any()


def test_surface_sheet_and_faces_are_background():
    m = np.zeros((4, 4, 4), np.uint8)
    m[:, :, 1] = 1
    assert len(extract_surface(m)) == 16
    full_but_one = np.ones((3, 3, 3), np.uint8)
    full_but_one[0, 0, 0] = 0
    # grid faces count as background, so only the center voxel is interior
    assert len(extract_surface(full_but_one)) == 25


def test_surface_degenerate():
    with pytest.raises(DegenerateMaskError):
        extract_surface(np.zeros((3, 3, 3)))


def test_parallel_sheets_two_mm_apart():
    a = np.zeros((6, 6, 6), np.uint8)
    b = np.zeros((6, 6, 6), np.uint8)
    a[:, :, 1] = 1
    b[:, :, 3] = 1
    sa, sb = extract_surface(a), extract_surface(b)
    assert assd(sa, sb) == 2.0
    assert hd95(sa, sb) == 2.0


def test_identical_surfaces_zero():
    m = random_mask(np.random.default_rng(0))
    s = extract_surface(m)
    assert assd(s, s) == 0.0 and hd95(s, s) == 0.0


def test_percentile_arithmetic():
    assert percentile_linear(np.arange(1, 101), 95) == pytest.approx(95.05)
    # points at 1..100 mm from a single target: pooled distances are 1..100 plus the reverse 1
    src = np.array([[0.0, 0.0, v] for v in range(1, 101)])
    dst = np.zeros((1, 3))
    expect = percentile_linear(np.concatenate([np.arange(1, 101), [1.0]]), 95)
    assert hd95(src, dst) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    a, b = random_mask(rng), random_mask(rng)
    spacing = tuple(rng.uniform(0.5, 2.0, size=3))
    sa, sb = extract_surface(a, spacing), extract_surface(b, spacing)
    na, nb = surface_points_naive(a, spacing), surface_points_naive(b, spacing)
    assert sorted(map(tuple, sa)) == sorted(map(tuple, na))
    pooled = np.concatenate([directed_distances_naive(na, nb), directed_distances_naive(nb, na)])
    assert assd(sa, sb) == pytest.approx(pooled.mean(), abs=1e-6)
    assert hd95(sa, sb) == pytest.approx(percentile_linear(pooled, 95), abs=1e-6)
    inter = int(np.logical_and(a, b).sum())
    assert dsc(a, b) == 2 * inter / (int(a.sum()) + int(b.sum()))


@pytest.mark.parametrize("seed", range(5))
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    sa, sb = extract_surface(random_mask(rng)), extract_surface(random_mask(rng))
    assert assd(sa, sb) == pytest.approx(assd(sb, sa), abs=1e-12)
    assert hd95(sa, sb) == pytest.approx(hd95(sb, sa), abs=1e-12)


def test_translation_invariance():
    rng = np.random.default_rng(7)
    a, b = random_mask(rng), random_mask(rng)
    pad = ((3, 0), (0, 2), (1, 1))
    ta, tb = np.pad(a, pad), np.pad(b, pad)
    m0, m1 = evaluate_case(LabelVolume(a), LabelVolume(b)), evaluate_case(LabelVolume(ta), LabelVolume(tb))
    assert m0.dsc == m1.dsc
    assert m0.assd == pytest.approx(m1.assd, abs=1e-12)
    assert m0.hd95 == pytest.approx(m1.hd95, abs=1e-12)


def test_spacing_covariance():
    rng = np.random.default_rng(8)
    a, b = random_mask(rng), random_mask(rng)
    sp = (0.7, 1.1, 0.9)
    m0 = evaluate_case(LabelVolume(a, sp), LabelVolume(b, sp))
    m1 = evaluate_case(LabelVolume(a, tuple(2.5 * s for s in sp)), LabelVolume(b, tuple(2.5 * s for s in sp)))
    assert m1.dsc == m0.dsc
    assert m1.assd == pytest.approx(2.5 * m0.assd)
    assert m1.hd95 == pytest.approx(2.5 * m0.hd95)


def test_empty_prediction_is_undefined(caplog):
    truth = LabelVolume(random_mask(np.random.default_rng(0)))
    with caplog.at_level(logging.WARNING):
        m = evaluate_case(LabelVolume(np.zeros((12, 12, 12))), truth, "c1")
    assert m.dsc == 0.0
    assert not m.surface_defined
    assert "undefined" in caplog.text


def test_aggregate_arithmetic():
    rep = aggregate([CaseMetrics("a", 0.9, 1.0, 2.0), CaseMetrics("b", 1.0, 3.0, 4.0)])
    assert rep.mean["dsc"] == pytest.approx(0.95)
    assert rep.sd["dsc"] == pytest.approx(0.05)
    assert rep.mean["assd"] == 2.0 and rep.sd["hd95"] == 1.0


def test_aggregate_single_case_and_order_independence():
    c = CaseMetrics("x", 0.8, 1.5, 3.0)
    rep = aggregate([c])
    assert rep.mean == {"dsc": 0.8, "assd": 1.5, "hd95": 3.0}
    assert rep.sd == {"dsc": 0.0, "assd": 0.0, "hd95": 0.0}
    cases = [CaseMetrics(str(i), 0.1 * i, float(i), 2.0 * i) for i in range(6)]
    assert aggregate(cases).to_csv() == aggregate(cases[::-1]).to_csv()


def test_aggregate_excludes_undefined():
    rep = aggregate([CaseMetrics("a", 0.0), CaseMetrics("b", 1.0, 2.0, 3.0)])
    assert rep.mean["assd"] == 2.0
    assert rep.mean["dsc"] == 0.5


def test_csv_layout():
    rep = aggregate([CaseMetrics("b", 1.0, 0.0, 0.0), CaseMetrics("a", 0.0)])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "case_id,dsc,assd_mm,hd95_mm"
    assert lines[1] == "a,0.0,undefined,undefined"
    assert lines[2] == "b,1.0,0.0,0.0"
    assert lines[3].startswith("mean,0.5,")
    assert lines[4].startswith("sd,0.5,")
