"""
Loss and attention ablation
===========================

Train plain U-Nets with the Dice loss and with surface + Dice, and the
attention network with surface + Dice, on 20 synthetic 48^3 volumes, then
compare them on 5 held-out volumes.  The full run (3 seeds, 60 epochs)
takes about 1.5 hours on one CPU core; ``python 07_ablation.py quick``
does one seed for 10 epochs.
"""
import logging
import sys

from csaseg.benchmark import BenchmarkConfig, run

logging.basicConfig(level=logging.INFO, format="%(message)s")
cfg = BenchmarkConfig()
if "quick" in sys.argv[1:]:
    cfg = BenchmarkConfig(seeds=(0,), max_epochs=10)

result = run(cfg)
print(result.table())
for name, ok in result.orderings().items():
    print("yes" if ok else "no ", name)
print("%.1f minutes" % (result.seconds / 60))
