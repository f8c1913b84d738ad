import dataclasses

import numpy as np
import pytest
from scipy import ndimage

from csaseg.errors import (BadMagicError, GeometryMismatchError, InfeasibleSpecError,
                           InvalidSpacingError, TruncatedPayloadError)
from csaseg.metrics import surface_mask
from csaseg.volume import (LabelVolume, SyntheticSpec, Volume, check_geometry, generate_synthetic,
                           read_volume, split_dataset, write_volume)

from oracles import euler_characteristic


def test_euler_oracle_sanity():
    assert euler_characteristic(np.ones((3, 3, 3))) == 1
    hollow = np.ones((3, 3, 3))
    hollow[1, 1, 1] = 0
    assert euler_characteristic(hollow) == 2  # ball with a cavity
    ring = np.ones((3, 3, 1))
    ring[1, 1, 0] = 0
    assert euler_characteristic(ring) == 0  # solid torus


# -- container ----------------------------------------------------------------

def test_round_trip_random_volume(tmp_path):
    data = np.random.default_rng(0).standard_normal((8, 8, 8)).astype(np.float32)
    write_volume(Volume(data, (0.8, 0.8, 0.8)), tmp_path / "v.vol")
    back = read_volume(tmp_path / "v.vol")
    assert isinstance(back, Volume)
    assert back.data.tobytes() == data.tobytes()
    assert back.spacing == (0.8, 0.8, 0.8)


def test_round_trip_labels_and_odd_spacing(tmp_path):
    labels = (np.random.default_rng(1).random((5, 6, 7)) > 0.5).astype(np.uint8)
    spacing = (0.1 + 0.2, 1 / 3, 2.5)
    write_volume(LabelVolume(labels, spacing), tmp_path / "l.vol")
    back = read_volume(tmp_path / "l.vol")
    assert isinstance(back, LabelVolume)
    np.testing.assert_array_equal(back.labels, labels)
    assert back.spacing == spacing


def test_header_layout(tmp_path):
    write_volume(Volume(np.zeros((2, 3, 4)), (1.0, 0.5, 0.25)), tmp_path / "v.vol")
    raw = (tmp_path / "v.vol").read_bytes()
    head, payload = raw.split(b"\n", 1)
    assert head.split() == [b"VOL1", b"f32", b"2", b"3", b"4", b"1.0", b"0.5", b"0.25"]
    assert len(payload) == 2 * 3 * 4 * 4


def test_truncated_payload(tmp_path):
    p = tmp_path / "v.vol"
    write_volume(Volume(np.ones((4, 4, 4))), p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(TruncatedPayloadError, match="truncated payload"):
        read_volume(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "v.vol"
    p.write_bytes(b"NIFTI f32 1 1 1 1 1 1\n\0\0\0\0")
    with pytest.raises(BadMagicError):
        read_volume(p)


def test_nonpositive_spacing_in_file(tmp_path):
    p = tmp_path / "v.vol"
    p.write_bytes(b"VOL1 u8 1 1 1 1.0 0.0 1.0\n\0")
    with pytest.raises(InvalidSpacingError):
        read_volume(p)


def test_label_values_validated():
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 2))


def test_geometry_check():
    a = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
    with pytest.raises(GeometryMismatchError):
        check_geometry(a, LabelVolume(np.zeros((4, 4, 5)), (1, 1, 1)))
    with pytest.raises(GeometryMismatchError):
        check_geometry(a, LabelVolume(np.zeros((4, 4, 4)), (1, 1, 2)))


# -- synthetic generator ----------------------------------------------------------

def test_same_seed_bit_identical():
    spec = SyntheticSpec(seed=5, extents=(32, 32, 32))
    (v1, l1), (v2, l2) = generate_synthetic(spec), generate_synthetic(spec)
    assert v1.data.tobytes() == v2.data.tobytes()
    assert l1.labels.tobytes() == l2.labels.tobytes()
    check_geometry(v1, l1)


def test_different_seeds_differ():
    a = generate_synthetic(SyntheticSpec(seed=1, extents=(32, 32, 32)))[1]
    b = generate_synthetic(SyntheticSpec(seed=2, extents=(32, 32, 32)))[1]
    assert not np.array_equal(a.labels, b.labels)


@pytest.mark.parametrize("seed", range(5))
def test_no_gaps_single_body_is_a_ball(seed):
    spec = SyntheticSpec(seed=seed, extents=(40, 40, 40), n_bodies=1, n_gaps=0)
    lab = generate_synthetic(spec)[1].labels
    _, n = ndimage.label(lab, structure=np.ones((3, 3, 3)))
    assert n == 1
    assert euler_characteristic(lab) == 1  # one component, no handles, no cavities


@pytest.mark.parametrize("seed", range(5))
def test_three_voxel_gap_splits_body(seed):
    spec = SyntheticSpec(seed=seed, extents=(40, 40, 40), n_bodies=1, n_gaps=1,
                         gap_width_range=(2.4, 2.4))
    lab = generate_synthetic(spec)[1].labels
    _, n = ndimage.label(lab, structure=np.ones((3, 3, 3)))
    assert n >= 2


def test_boundary_brighter_than_soft_tissue_over_100_seeds():
    base = SyntheticSpec(extents=(32, 32, 32), radius_range=(6.0, 10.0), hu_range=None)
    threshold = base.soft_tissue_level - base.noise_sigma
    means = []
    for seed in range(100):
        vol, lab = generate_synthetic(dataclasses.replace(base, seed=seed))
        means.append(vol.data[surface_mask(lab.labels)].mean())
    assert np.mean(means) > threshold
    assert min(means) > threshold


def test_hu_output_inverts_window():
    norm = generate_synthetic(SyntheticSpec(seed=3, extents=(32, 32, 32), hu_range=None))[0].data
    hu = generate_synthetic(SyntheticSpec(seed=3, extents=(32, 32, 32)))[0].data
    np.testing.assert_allclose(hu, -200 + 1000 * norm.astype(np.float64), rtol=1e-6, atol=1e-3)


@pytest.mark.parametrize("kwargs", [
    dict(extents=(16, 16, 16), radius_range=(7.0, 12.0)),
    dict(radius_range=(5.0, 3.0)),
    dict(gap_width_range=(0.2, 0.4)),
])
def test_infeasible_specs(kwargs):
    with pytest.raises(InfeasibleSpecError):
        generate_synthetic(SyntheticSpec(**kwargs))


# -- split -----------------------------------------------------------------------

def test_split_103_gives_83_20():
    tr, te = split_dataset(range(103), 0.8, seed=0)
    assert (len(tr), len(te)) == (83, 20)
    assert sorted(tr + te) == list(range(103))


def test_split_10():
    tr, te = split_dataset(list("abcdefghij"), 0.8, seed=4)
    assert (len(tr), len(te)) == (8, 2)
    assert not set(tr) & set(te)


def test_split_deterministic():
    assert split_dataset(range(30), 0.8, 11) == split_dataset(range(30), 0.8, 11)
    assert split_dataset(range(30), 0.8, 11) != split_dataset(range(30), 0.8, 12)


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset([], 0.8)
    with pytest.raises(ValueError):
        split_dataset([1, 2], 1.0)
