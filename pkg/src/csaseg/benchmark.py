"""Ablation harness on a fixed synthetic benchmark.

Three arms are trained on the same data for each seed:

* ``unet-dice``      plain skips, Dice loss only
* ``unet-combined``  plain skips, surface + Dice
* ``csa-combined``   cross-scale attention at levels 2 and 3, surface + Dice

and scored on held-out volumes.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import MetricReport
from .model import Network, NetworkConfig
from .preprocess import PreprocessConfig, preprocess_pair
from .trainer import Case, Dataset, TrainConfig, evaluate, train
from .volume import SyntheticSpec, generate_synthetic

log = logging.getLogger(__name__)

ARMS = {
    "unet-dice": ((), "dice-only"),
    "unet-combined": ((), "combined"),
    "csa-combined": ((2, 3), "combined"),
}


@dataclass
class BenchmarkConfig:
    n_train: int = 20
    n_test: int = 5
    extent: int = 48
    data_seed: int = 1000
    seeds: tuple[int, ...] = (0, 1, 2)
    max_epochs: int = 60
    base_width: int = 8
    patch_size: int = 32
    batch_size: int = 2
    arms: tuple[str, ...] = tuple(ARMS)


@dataclass
class BenchmarkResult:
    reports: dict[str, list[MetricReport]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, arm: str, key: str) -> float:
        return float(np.mean([r.mean[key] for r in self.reports[arm]]))

    def table(self) -> str:
        rows = [f"{'arm':<15}{'DSC':>8}{'ASSD mm':>10}{'95HD mm':>10}"]
        for arm in self.reports:
            rows.append(f"{arm:<15}{self.mean(arm, 'dsc'):>8.4f}{self.mean(arm, 'assd'):>10.3f}"
                        f"{self.mean(arm, 'hd95'):>10.3f}")
        return "\n".join(rows)

    def orderings(self, dsc_margin: float = 0.02, atol: float = 1e-9) -> dict[str, bool]:
        """Boundary metrics of the surface-supervised arms versus the Dice-only baseline.

        ``atol`` (mm) only absorbs float rounding: equal 95HD values on the voxel grid can
        differ in the last bit depending on summation order.
        """
        m = self.mean
        base = "unet-dice"

        def le(arm, key):
            return m(arm, key) <= m(base, key) + atol

        return {
            "csa-combined ASSD <= unet-dice": le("csa-combined", "assd"),
            "csa-combined 95HD <= unet-dice": le("csa-combined", "hd95"),
            "unet-combined ASSD <= unet-dice": le("unet-combined", "assd"),
            "unet-combined 95HD <= unet-dice": le("unet-combined", "hd95"),
            "combined DSC >= dice DSC - margin": all(
                m(a, "dsc") >= m(base, "dsc") - dsc_margin for a in ("unet-combined", "csa-combined")),
        }


def make_data(cfg: BenchmarkConfig) -> tuple[Dataset, PreprocessConfig]:
    """Synthetic train/test volumes, preprocessed; volume ``i`` uses seed ``data_seed + i``."""
    pcfg = PreprocessConfig(patch_size=cfg.extent)
    cases = []
    for i in range(cfg.n_train + cfg.n_test):
        spec = SyntheticSpec(seed=cfg.data_seed + i, extents=(cfg.extent,) * 3)
        vol, lab = preprocess_pair(*generate_synthetic(spec), pcfg)
        cases.append(Case(f"syn{i:03d}", vol, lab))
    return Dataset(cases[:cfg.n_train], cases[cfg.n_train:]), pcfg


def run(cfg: BenchmarkConfig | None = None, progress=None) -> BenchmarkResult:
    cfg = cfg or BenchmarkConfig()
    data, infer_cfg = make_data(cfg)
    train_only = Dataset(data.train)
    result = BenchmarkResult({a: [] for a in cfg.arms})
    start = time.perf_counter()
    for seed in cfg.seeds:
        for arm in cfg.arms:
            levels, mode = ARMS[arm]
            net = Network(NetworkConfig(base_width=cfg.base_width, csa_levels=levels), seed=seed)
            tcfg = TrainConfig(loss_mode=mode, seed=seed, max_epochs=cfg.max_epochs,
                               patch_size=cfg.patch_size, batch_size=cfg.batch_size)
            t0 = time.perf_counter()
            train(net, train_only, tcfg)
            report = evaluate(net, data.val, infer_cfg)
            result.reports[arm].append(report)
            log.info("%s seed %d: %s (%.0f s)", arm, seed, report.mean, time.perf_counter() - t0)
            if progress:
                progress(arm, seed, report)
    result.seconds = time.perf_counter() - start
    return result
