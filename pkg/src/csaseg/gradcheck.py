"""Finite-difference gradient suite over every differentiable operator.

Each entry of ``OP_CHECKS`` builds a small random problem, runs
:func:`csaseg.tensor.grad_check` on it and returns the worst relative
error.  ``TOLERANCES`` holds the pass thresholds; ``run_suite`` is what the
``gradcheck`` CLI subcommand calls.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, grad_check


def _rand(rng, *shape, scale=1.0):
    return Tensor((rng.standard_normal(shape) * scale).astype(np.float32), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    # random projection so every output element contributes a distinct weight
    w = Tensor(rng.standard_normal(out.shape).astype(np.float32))
    return (out * w).sum()


def check_conv3d(seed=0):
    rng = np.random.default_rng(seed)
    x, w, b = _rand(rng, 1, 2, 4, 4, 4), _rand(rng, 3, 2, 3, 3, 3), _rand(rng, 3)
    proj = Tensor(rng.standard_normal((1, 3, 2, 2, 2)).astype(np.float32))
    return grad_check(lambda: (T.conv3d(x, w, b, stride=2, padding=1) * proj).sum(), [x, w, b])


def check_conv_transpose3d(seed=0):
    rng = np.random.default_rng(seed)
    x, w, b = _rand(rng, 1, 2, 2, 2, 2), _rand(rng, 2, 3, 3, 3, 3), _rand(rng, 3)
    proj = Tensor(rng.standard_normal((1, 3, 4, 4, 4)).astype(np.float32))
    return grad_check(lambda: (T.conv_transpose3d(x, w, b, 2, 1, 1) * proj).sum(), [x, w, b])


def check_max_pool3d(seed=0):
    rng = np.random.default_rng(seed)
    # well-separated values so +-h never changes the argmax
    vals = rng.permutation(2 * 4 ** 3).astype(np.float32).reshape(1, 2, 4, 4, 4) * 0.1
    x = Tensor(vals, requires_grad=True)
    proj = Tensor(rng.standard_normal((1, 2, 2, 2, 2)).astype(np.float32))
    return grad_check(lambda: (T.max_pool3d(x) * proj).sum(), [x])


def check_batch_norm(seed=0):
    rng = np.random.default_rng(seed)
    x, g, b = _rand(rng, 2, 3, 3, 3, 3), _rand(rng, 3), _rand(rng, 3)
    proj = Tensor(rng.standard_normal(x.shape).astype(np.float32))
    return grad_check(lambda: (T.batch_norm(x, g, b, training=True) * proj).sum(), [x, g, b])


def check_relu(seed=0):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((2, 3, 4)).astype(np.float32)
    d = np.where(np.abs(d) < 0.05, 0.5, d)  # keep away from the kink
    x = Tensor(d, requires_grad=True)
    proj = Tensor(rng.standard_normal(d.shape).astype(np.float32))
    return grad_check(lambda: (T.relu(x) * proj).sum(), [x])


def check_sigmoid(seed=0):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 4, scale=2.0)
    proj = Tensor(rng.standard_normal(x.shape).astype(np.float32))
    return grad_check(lambda: (T.sigmoid(x) * proj).sum(), [x])


def check_softmax(seed=0):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 2, 2, 2)
    proj = Tensor(rng.standard_normal(x.shape).astype(np.float32))
    return grad_check(lambda: (T.softmax_channel(x) * proj).sum(), [x])


def check_upsample(seed=0):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 1, 2, 2, 3, 2)
    proj = Tensor(rng.standard_normal((1, 2, 4, 6, 4)).astype(np.float32))
    return grad_check(lambda: (T.upsample_trilinear(x, 2) * proj).sum(), [x])


def check_concat(seed=0):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, 1, 2, 2, 2, 2), _rand(rng, 1, 3, 2, 2, 2)
    proj = Tensor(rng.standard_normal((1, 5, 2, 2, 2)).astype(np.float32))
    return grad_check(lambda: (T.concat([a, b]) * proj).sum(), [a, b])


def check_div(seed=0):
    rng = np.random.default_rng(seed)
    a = _rand(rng, 3, 4)
    b = Tensor((rng.uniform(0.5, 2.0, (3, 4))).astype(np.float32), requires_grad=True)
    return grad_check(lambda: (a / b).sum() / (b * b).sum(), [a, b])


def check_surface_loss(seed=0):
    from .losses import LossConfig, signed_distance, surface_loss
    from .volume import LabelVolume
    rng = np.random.default_rng(seed)
    mask = np.zeros((4, 4, 4), np.uint8)
    mask[1:3, 1:4, 0:2] = 1
    sdf = signed_distance(LabelVolume(mask, (0.8, 0.8, 0.8)))
    logits = _rand(rng, 1, 2, 4, 4, 4)
    cfg = LossConfig()
    return grad_check(lambda: surface_loss(T.softmax_channel(logits), sdf, cfg), [logits])


def check_dice_loss(seed=0):
    from .losses import LossConfig, dice_loss
    rng = np.random.default_rng(seed)
    target = (rng.random((1, 4, 4, 4)) > 0.6).astype(np.uint8)
    logits = _rand(rng, 1, 2, 4, 4, 4)
    return grad_check(lambda: dice_loss(T.softmax_channel(logits), target, LossConfig()), [logits])


def check_csa(seed=0):
    from .model import CsaModule
    rng = np.random.default_rng(seed)
    csa = CsaModule(level=2, c1=2, cl=3, cg=4, inter=2, rng=rng)
    f1, fl, fg = _rand(rng, 1, 2, 4, 4, 4), _rand(rng, 1, 3, 2, 2, 2), _rand(rng, 1, 4, 1, 1, 1)
    proj = Tensor(rng.standard_normal((1, 3, 2, 2, 2)).astype(np.float32))
    params = [f1, fl, fg] + csa.parameters()
    return grad_check(lambda: (csa(f1, fl, fg) * proj).sum(), params)


def check_network(seed=0, coords=10):
    from .losses import LossConfig, combined_loss, signed_distance
    from .model import Network, NetworkConfig
    from .volume import LabelVolume
    rng = np.random.default_rng(seed)
    net = Network(NetworkConfig(base_width=2), seed=seed)
    x = Tensor(rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32))
    mask = np.zeros((8, 8, 8), np.uint8)
    mask[2:6, 1:5, 3:7] = 1
    target = mask[None]
    sdf = signed_distance(LabelVolume(mask, (0.8, 0.8, 0.8)))
    cfg = LossConfig()
    return grad_check(lambda: combined_loss(net(x), target, sdf, cfg), net.parameters(),
                      coords=coords, seed=seed)


OP_CHECKS = {
    "conv3d": check_conv3d,
    "conv_transpose3d": check_conv_transpose3d,
    "max_pool3d": check_max_pool3d,
    "batch_norm": check_batch_norm,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "softmax": check_softmax,
    "upsample": check_upsample,
    "concat": check_concat,
    "div": check_div,
    "surface_loss": check_surface_loss,
    "dice_loss": check_dice_loss,
    "csa": check_csa,
    "network": check_network,
}

TOLERANCES = {name: 1e-3 for name in OP_CHECKS}
TOLERANCES["surface_loss"] = 1e-2
TOLERANCES["network"] = 5e-2


def run_suite(names=None, seed=0) -> dict[str, tuple[float, bool]]:
    results = {}
    for name in names or OP_CHECKS:
        err = float(OP_CHECKS[name](seed))
        results[name] = (err, err < TOLERANCES[name])
    return results
