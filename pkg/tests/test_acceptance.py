"""Acceptance suite: one test per criterion, each checked at its stated tolerance and time budget.

A PASS/FAIL line per criterion is printed in the terminal summary (see conftest.py).
"""
import time

import numpy as np
import pytest

from csaseg.benchmark import BenchmarkConfig, run as run_benchmark
from csaseg.gradcheck import TOLERANCES, run_suite
from csaseg.losses import LossConfig, signed_distance, surface_loss
from csaseg.metrics import assd, dsc, extract_surface, hd95
from csaseg.model import CsaModule, Network, NetworkConfig
from csaseg.preprocess import PreprocessConfig, preprocess_pair
from csaseg.tensor import Tensor, no_grad
from csaseg.trainer import Case, Dataset, TrainConfig, train
from csaseg.volume import LabelVolume, SyntheticSpec, Volume, generate_synthetic, read_volume, write_volume

from oracles import (directed_distances_naive, percentile_linear, signed_distance_bruteforce,
                     surface_points_naive)


def probs(fg):
    fg = np.asarray(fg, np.float32)
    return Tensor(np.stack([1 - fg, fg])[None])


@pytest.mark.criterion(2, "signed distance transform equals the brute-force oracle")
def test_criterion_2_sdt_oracle(record_property):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for i in range(100):
        shape = tuple(int(n) for n in rng.integers(1, 17, size=3))
        if i < 50:
            spacing = (float(rng.uniform(0.3, 2.0)),) * 3
        else:
            spacing = tuple(float(s) for s in rng.uniform(0.3, 2.0, size=3))
        m = rng.random(shape) < rng.uniform(0.02, 0.7)
        if m.all() or not m.any():
            m.flat[rng.integers(m.size)] ^= True
        if m.all() or not m.any():
            continue
        diff = np.abs(signed_distance(m, spacing).phi - signed_distance_bruteforce(m, spacing)).max()
        worst = max(worst, float(diff))
    elapsed = time.perf_counter() - start
    record_property("detail", f"100 masks up to 16^3, worst |diff| {worst:.2e} mm, {elapsed:.1f} s")
    assert worst <= 1e-5
    assert elapsed < 60


@pytest.mark.criterion(3, "finite-difference gradient suite")
def test_criterion_3_gradients(record_property):
    start = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - start
    record_property("detail", "\n".join(
        f"{name:<17} {err:.2e} (tol {TOLERANCES[name]:.0e})" for name, (err, _) in results.items()))
    expected = {"conv3d", "conv_transpose3d", "max_pool3d", "batch_norm", "relu", "sigmoid", "softmax",
                "upsample", "surface_loss", "dice_loss", "csa", "network"}
    assert expected <= set(results)
    assert all(ok for _, ok in results.values())
    assert elapsed < 300


@pytest.mark.criterion(4, "metrics equal brute-force implementations")
def test_criterion_4_metric_oracle(record_property):
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        spacing = tuple(float(s) for s in rng.uniform(0.5, 1.5, size=3))
        a = rng.random((12, 12, 12)) < rng.uniform(0.1, 0.6)
        b = a ^ (rng.random((12, 12, 12)) < rng.uniform(0.02, 0.3))
        for m in (a, b):
            if m.all() or not m.any():
                m.flat[0] ^= True
        sa, sb = extract_surface(a, spacing), extract_surface(b, spacing)
        na, nb = surface_points_naive(a, spacing), surface_points_naive(b, spacing)
        assert len(sa) == len(na) and len(sb) == len(nb)
        assert sorted(map(tuple, sa)) == sorted(map(tuple, na))
        inter, total = int((a & b).sum()), int(a.sum()) + int(b.sum())
        assert dsc(a, b) == 2 * inter / total
        pooled = np.concatenate([directed_distances_naive(na, nb), directed_distances_naive(nb, na)])
        worst = max(worst, abs(assd(sa, sb) - pooled.mean()), abs(hd95(sa, sb) - percentile_linear(pooled, 95)))
    elapsed = time.perf_counter() - start
    record_property("detail", f"50 pairs of 12^3 masks, worst distance diff {worst:.2e} mm, {elapsed:.1f} s")
    assert worst <= 1e-6
    assert elapsed < 60


@pytest.mark.criterion(5, "forward shape contract and attention placement")
def test_criterion_5_shapes_and_placement(monkeypatch, record_property):
    net = Network(NetworkConfig(base_width=8), seed=0).eval()
    x = Tensor(np.random.default_rng(5).standard_normal((1, 1, 32, 32, 32)).astype(np.float32))
    levels = []
    original = CsaModule.__call__

    def spy(self, *args):
        levels.append(self.level)
        return original(self, *args)

    monkeypatch.setattr(CsaModule, "__call__", spy)
    with no_grad():
        out = net(x).data
    monkeypatch.setattr(CsaModule, "__call__", original)
    assert out.shape == (1, 2, 32, 32, 32)
    sum_err = float(np.abs(out.sum(axis=1) - 1).max())
    assert sum_err <= 1e-5
    assert sorted(levels) == [2, 3]

    changes = {}
    for level in (2, 3):
        saved = net.csa(level)
        setattr(net, f"csa{level}", None)
        with no_grad():
            changes[level] = float(np.abs(net(x).data - out).max())
        setattr(net, f"csa{level}", saved)
    record_property("detail", f"sum error {sum_err:.1e}; CSA called at {sorted(levels)}; "
                              f"ablation change L2 {changes[2]:.2e}, L3 {changes[3]:.2e}")
    assert all(v > 0 for v in changes.values())


@pytest.mark.slow
@pytest.mark.criterion(6, "overfit sanity: each loss mode reaches training DSC > 0.95")
def test_criterion_6_overfit(record_property):
    spec = SyntheticSpec(seed=3, extents=(32, 32, 32), n_bodies=1, radius_range=(6.0, 10.0), n_gaps=1)
    pcfg = PreprocessConfig(patch_size=32)
    vol, lab = preprocess_pair(*generate_synthetic(spec), pcfg)
    case = Case("overfit", vol, lab)
    data = Dataset([case], [case])
    start = time.perf_counter()
    final = {}
    for mode in ("dice-only", "surface-only", "combined"):
        net = Network(NetworkConfig(base_width=8), seed=0)
        cfg = TrainConfig(loss_mode=mode, max_epochs=150, batch_size=1, patch_size=32, val_every=10)
        rec = train(net, data, cfg, infer_cfg=pcfg)
        final[mode] = rec.val_reports[149].mean["dsc"]
        assert rec.epoch_losses[99] < rec.epoch_losses[0]
    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(f"{m} DSC {v:.4f}" for m, v in final.items()) + f"; {elapsed:.0f} s")
    assert all(v > 0.95 for v in final.values())
    assert elapsed < 20 * 60


@pytest.mark.slow
@pytest.mark.criterion(7, "ablation ordering on the synthetic benchmark")
def test_criterion_7_ablation_ordering(record_property):
    result = run_benchmark(BenchmarkConfig())
    orderings = result.orderings(dsc_margin=0.02)
    record_property("detail", result.table() + "\n" + "\n".join(
        f"{'ok ' if ok else 'NO '} {name}" for name, ok in orderings.items()) + f"\n{result.seconds / 60:.1f} min")
    assert all(orderings.values())
    assert result.seconds < 4 * 3600


@pytest.mark.criterion(8, "surface loss behaviour")
def test_criterion_8_surface_loss(record_property):
    fixture = signed_distance(LabelVolume(np.array([0, 1, 0], np.uint8).reshape(1, 1, 3)))
    raw = LossConfig(surface_reduction="sum")
    assert surface_loss(probs([[[0, 1, 0]]]), fixture, raw).item() == -1.0
    assert surface_loss(probs([[[0.5, 0.5, 0.5]]]), fixture, raw).item() == 0.5

    rng = np.random.default_rng(8)
    worst_lin = 0.0
    for _ in range(20):
        m = (rng.random((6, 6, 6)) > 0.5).astype(np.uint8)
        sdf = signed_distance(m)
        s1, s2, alpha = rng.random((6, 6, 6)), rng.random((6, 6, 6)), rng.random()
        lhs = surface_loss(probs(alpha * s1 + (1 - alpha) * s2), sdf).item()
        rhs = alpha * surface_loss(probs(s1), sdf).item() + (1 - alpha) * surface_loss(probs(s2), sdf).item()
        worst_lin = max(worst_lin, abs(lhs - rhs))

        s = rng.uniform(0.05, 0.95, (6, 6, 6))
        base = surface_loss(probs(s), sdf, raw).item()
        for q in map(tuple, rng.integers(0, 6, size=(5, 3))):
            t = s.copy()
            t[q] += 0.04 if sdf.phi[q] < 0 else -0.04
            assert surface_loss(probs(t), sdf, raw).item() < base
    record_property("detail", f"fixture -1.0 / +0.5 exact; worst linearity error {worst_lin:.1e}")
    assert worst_lin <= 1e-5


@pytest.mark.criterion(9, "format round-trips and training determinism")
def test_criterion_9_round_trips(tmp_path, record_property):
    rng = np.random.default_rng(9)
    vol = Volume(rng.standard_normal((9, 8, 7)).astype(np.float32), (0.8, 0.8, 0.8))
    lab = LabelVolume((rng.random((9, 8, 7)) > 0.5).astype(np.uint8), (0.8, 0.7, 1.3))
    for obj, name in ((vol, "v.vol"), (lab, "l.vol")):
        write_volume(obj, tmp_path / name)
        back = read_volume(tmp_path / name)
        assert back.data.tobytes() == obj.data.tobytes() and back.spacing == obj.spacing

    net = Network(NetworkConfig(base_width=2), seed=1)
    net.save(tmp_path / "n.ckpt")
    back = Network.load(tmp_path / "n.ckpt")
    for (_, a), (_, b) in zip(net.named_parameters(), back.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    for (_, a), (_, b) in zip(net.named_buffers(), back.named_buffers()):
        assert a.tobytes() == b.tobytes()

    spec = SyntheticSpec(seed=1, extents=(16, 16, 16), n_bodies=1, radius_range=(3.0, 5.0), n_gaps=1)
    case = Case("c", *preprocess_pair(*generate_synthetic(spec), PreprocessConfig(patch_size=16)))
    traces = []
    for _ in range(2):
        cfg = TrainConfig(max_epochs=3, batch_size=1, patch_size=16, seed=7)
        traces.append(train(Network(NetworkConfig(base_width=2), seed=7), Dataset([case]), cfg).loss_csv())
    record_property("detail", "VOL1 f32/u8 and checkpoint bytes identical; same-seed loss traces identical")
    assert traces[0] == traces[1]
