"""Training loop: Adam with per-epoch cosine annealing over sampled patch batches."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as config_io
from .errors import ConfigError, DegenerateMaskError, NonFiniteLossError
from .losses import LossConfig, combined_loss, dice_loss, signed_distance, surface_loss
from .metrics import MetricReport, aggregate, evaluate_case
from .model import Network
from .preprocess import (PreprocessConfig, extract_patches, pad_to_patch, preprocess_volume,
                         probabilities_to_labels, stitch_patches, tile_origins)
from .tensor import Tensor, no_grad
from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)

LOSS_MODES = ("dice-only", "surface-only", "combined")


@dataclass
class TrainConfig:
    initial_lr: float = 0.01
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_min: float = 0.0
    batch_size: int = 2
    max_epochs: int = 200
    lam: float = 1.0
    loss_mode: str = "combined"
    surface_reduction: str = "mean"
    dice_smooth: float = 1e-5
    seed: int = 0
    patch_size: int = 32
    patches_per_volume: int = 1
    foreground_prob: float = 0.5
    val_every: int = 1

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patches_per_volume < 1:
            raise ConfigError("batch_size, max_epochs and patches_per_volume must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.patch_size % 8:
            raise ConfigError("patch_size must be a multiple of 8")

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, surface_reduction=self.surface_reduction, dice_smooth=self.dice_smooth)


# -- optimizer / schedule ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def create(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.data.dtype)
    return state


def cosine_lr(epoch: float, max_epochs: int, lr0: float, lr_min: float = 0.0) -> float:
    if not 0 <= epoch <= max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / max_epochs))


# -- data -----------------------------------------------------------------------------------

@dataclass
class Case:
    case_id: str
    volume: Volume  # preprocessed
    label: LabelVolume


@dataclass
class Dataset:
    train: list[Case]
    val: list[Case] = field(default_factory=list)


@dataclass
class RunRecord:
    config: TrainConfig
    epoch_losses: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    val_reports: dict[int, MetricReport] = field(default_factory=dict)
    skipped_patches: int = 0
    checkpoints: dict[str, str] = field(default_factory=dict)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss", "val_dsc", "val_assd_mm", "val_hd95_mm"])
        for e, (lr, loss) in enumerate(zip(self.lr_trace, self.epoch_losses)):
            rep = self.val_reports.get(e)
            vals = [repr(rep.mean[k]) for k in ("dsc", "assd", "hd95")] if rep else ["", "", ""]
            w.writerow([e, repr(lr), repr(loss)] + vals)
        return buf.getvalue()

    def manifest(self) -> str:
        lines = ["# run record", config_io.dump(self.config).rstrip()]
        lines.append(f"epochs_run={len(self.epoch_losses)}")
        lines.append(f"skipped_patches={self.skipped_patches}")
        for k, v in sorted(self.checkpoints.items()):
            lines.append(f"checkpoint_{k}={v}")
        return "\n".join(lines) + "\n"

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "run_manifest.txt").write_text(self.manifest())
        (d / "loss_trace.csv").write_text(self.loss_csv())


# -- training -----------------------------------------------------------------------------------

def _loss(mode: str, probs: Tensor, targets: np.ndarray, phis: np.ndarray, cfg: LossConfig) -> Tensor:
    if mode == "dice-only":
        return dice_loss(probs, targets, cfg)
    if mode == "surface-only":
        return surface_loss(probs, phis, cfg)
    return combined_loss(probs, targets, phis, cfg)


def _epoch_patches(dataset: Dataset, cfg: TrainConfig, epoch: int):
    pcfg = PreprocessConfig(patch_size=cfg.patch_size, foreground_prob=cfg.foreground_prob)
    out = []
    for idx, case in enumerate(dataset.train):
        seed = int(np.random.SeedSequence([cfg.seed, epoch, idx]).generate_state(1)[0])
        stream = extract_patches(case.volume, case.label, pcfg, seed=seed, mode="train",
                                 count=cfg.patches_per_volume)
        out.extend((case.case_id, p) for p in stream)
    order = np.random.default_rng([cfg.seed, epoch, 7919]).permutation(len(out))
    return [out[i] for i in order]


def train(network: Network, dataset: Dataset, cfg: TrainConfig, checkpoint_dir=None,
          infer_cfg: PreprocessConfig | None = None, progress=None) -> RunRecord:
    """Train ``network`` in place and return the per-epoch record.

    Patches whose label is all one class have no signed distance map and are
    skipped (with a warning) in every loss mode, so the modes see identical
    batches.  A non-finite loss aborts with :class:`NonFiniteLossError`.
    """
    record = RunRecord(cfg)
    loss_cfg = cfg.loss_config()
    params = network.parameters()
    state = AdamState.create(params)
    sdf_cache: dict = {}
    best = -1.0
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt:
        ckpt.mkdir(parents=True, exist_ok=True)
    infer_cfg = infer_cfg or PreprocessConfig(patch_size=cfg.patch_size)
    spacing = dataset.train[0].volume.spacing

    for epoch in range(cfg.max_epochs):
        lr = cosine_lr(epoch, cfg.max_epochs, cfg.initial_lr, cfg.lr_min)
        record.lr_trace.append(lr)
        network.train()
        usable = []
        for case_id, patch in _epoch_patches(dataset, cfg, epoch):
            key = (case_id, patch.origin)
            if key not in sdf_cache:
                try:
                    sdf_cache[key] = signed_distance(patch.label, spacing).phi.astype(np.float32)
                except DegenerateMaskError:
                    sdf_cache[key] = None
            if sdf_cache[key] is None:
                log.warning("skipping single-class patch %s at %s", case_id, patch.origin)
                record.skipped_patches += 1
                continue
            usable.append((patch, sdf_cache[key]))

        losses = []
        for start in range(0, len(usable), cfg.batch_size):
            batch = usable[start:start + cfg.batch_size]
            x = Tensor(np.stack([p.data for p, _ in batch])[:, None].astype(np.float32))
            targets = np.stack([p.label for p, _ in batch])
            phis = np.stack([phi for _, phi in batch])
            probs = network(x)
            loss = _loss(cfg.loss_mode, probs, targets, phis, loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                snap = None
                if ckpt:
                    snap = str(ckpt / f"nonfinite_epoch{epoch}.ckpt")
                    network.save(snap)
                raise NonFiniteLossError(
                    f"non-finite loss {value} at epoch {epoch}, batch {start // cfg.batch_size}", snap)
            network.zero_grad()
            loss.backward()
            adam_step(params, [p.grad for p in params], state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            losses.append(value)
        record.epoch_losses.append(float(np.mean(losses)) if losses else math.nan)

        last = epoch == cfg.max_epochs - 1
        if dataset.val and ((epoch + 1) % cfg.val_every == 0 or last):
            report = evaluate(network, dataset.val, infer_cfg)
            record.val_reports[epoch] = report
            if ckpt and report.mean["dsc"] > best:
                best = report.mean["dsc"]
                network.save(ckpt / "best.ckpt")
                record.checkpoints["best"] = str(ckpt / "best.ckpt")
        if progress:
            progress(epoch, record)
    if ckpt:
        network.save(ckpt / "final.ckpt")
        record.checkpoints["final"] = str(ckpt / "final.ckpt")
    network.eval()
    return record


# -- inference ---------------------------------------------------------------------------------

def predict_probabilities(network: Network, volume: Volume, patch_size: int, overlap: int = 0) -> np.ndarray:
    """Tile an already preprocessed volume, run the network per tile and stitch (C, D, H, W)."""
    network.eval()
    padded, extents = pad_to_patch(volume, patch_size)
    preds, origins = [], []
    with no_grad():
        for o in tile_origins(padded.extents, patch_size, overlap):
            sl = tuple(slice(a, a + patch_size) for a in o)
            x = Tensor(padded.data[sl][None, None])
            preds.append(network(x).data[0])
            origins.append(o)
    probs = stitch_patches(preds, origins, padded.extents)
    return probs[(slice(None),) + tuple(slice(0, n) for n in extents)]


def infer(network: Network, volume: Volume, preprocess_cfg: PreprocessConfig,
          preprocessed: bool = False) -> LabelVolume:
    """Preprocess, tile, predict, stitch and argmax into a label volume at the target spacing."""
    vol = volume if preprocessed else preprocess_volume(volume, preprocess_cfg)
    probs = predict_probabilities(network, vol, preprocess_cfg.patch_size, preprocess_cfg.patch_overlap)
    return LabelVolume(probabilities_to_labels(probs), vol.spacing)


def evaluate(network: Network, cases: Sequence[Case], infer_cfg: PreprocessConfig) -> MetricReport:
    results = []
    for case in cases:
        pred = infer(network, case.volume, infer_cfg, preprocessed=True)
        results.append(evaluate_case(pred, case.label, case.case_id))
    return aggregate(results)
