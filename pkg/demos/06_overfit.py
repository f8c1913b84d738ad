"""
Overfitting a single volume
===========================

Train on one 32^3 synthetic volume with each loss and watch the training
DSC climb.  Pass a number of epochs to shorten the run (default 150).
"""
import sys
import time

from csaseg.model import Network, NetworkConfig
from csaseg.preprocess import PreprocessConfig, preprocess_pair
from csaseg.trainer import Case, Dataset, TrainConfig, train
from csaseg.volume import SyntheticSpec, generate_synthetic

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 150
spec = SyntheticSpec(seed=3, extents=(32, 32, 32), n_bodies=1, radius_range=(6.0, 10.0), n_gaps=1)
pcfg = PreprocessConfig(patch_size=32)
case = Case("overfit", *preprocess_pair(*generate_synthetic(spec), pcfg))
data = Dataset([case], [case])

for mode in ("dice-only", "surface-only", "combined"):
    t0 = time.time()
    cfg = TrainConfig(loss_mode=mode, max_epochs=epochs, batch_size=1, patch_size=32,
                      val_every=max(1, epochs // 5))
    rec = train(Network(NetworkConfig(base_width=8), seed=0), data, cfg, infer_cfg=pcfg)
    curve = "  ".join("e%d %.3f" % (e + 1, r.mean["dsc"]) for e, r in sorted(rec.val_reports.items()))
    print("%-13s %s  (%.0f s)" % (mode, curve, time.time() - t0))
