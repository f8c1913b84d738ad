"""
The segmentation network
========================

A four-level 3D U-Net whose level-2 and level-3 skip connections pass
through cross-scale attention, plus a finite-difference check of its
gradients.
"""
import numpy as np

from csaseg.gradcheck import TOLERANCES, run_suite
from csaseg.model import Network, NetworkConfig
from csaseg.tensor import Tensor, no_grad

net = Network(NetworkConfig(base_width=8), seed=0).eval()
plain = Network(NetworkConfig(base_width=8, csa_levels=()), seed=0)
print("channel widths:", net.cfg.widths())
print("parameters: %d with attention, %d without" % (net.parameter_count(), plain.parameter_count()))

x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 32, 32, 32)).astype(np.float32))
with no_grad():
    p = net(x)
print("output", p.shape, "channel sums within %.1e of 1" % np.abs(p.data.sum(1) - 1).max())

# Look inside the level-2 attention module.
with no_grad():
    f1, p1 = net.enc1(x)
    f2, p2 = net.enc2(p1)
    f3, p3 = net.enc3(p2)
    f4, _ = net.enc4(p3)
    d3 = net.dec3(f4, net.csa3(f1, f3, f4))
    att1, f2_hat = net.csa2.attention_1(f1, f2)
    out, att2 = net.csa2.attention_2(f2_hat, d3)
print("level-2 gates: first %s in (%.3f, %.3f), second %s in (%.3f, %.3f)" % (
    att1.shape, att1.data.min(), att1.data.max(), att2.shape, att2.data.min(), att2.data.max()))

print("finite-difference check of every op:")
for name, (err, ok) in run_suite().items():
    print("  %-17s %.1e  %s" % (name, err, "ok" if ok else "over tolerance %.0e" % TOLERANCES[name]))
