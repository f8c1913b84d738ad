"""3D U-Net with cross-scale attention (CSA) gating on selected skip connections.

Four encoder levels (the fourth is the bottleneck) and three decoder levels.
At each CSA level ``l`` the encoder features ``Fl`` are gated twice before
being concatenated in the decoder:

    Att1   = sigmoid(squeeze1(relu(conv_l(Fl) + conv_1(F1))))   at Fl resolution
    Fl_hat = Fl * Att1
    Att2   = sigmoid(squeeze2(relu(conv_g(Fg) + conv_lhat(Fl_hat))))  at Fg resolution
    out    = Fl_hat * upsample(Att2)

``F1`` is the first-level encoder output, brought to Fl's resolution by a
strided convolution (kernel = stride = 2**(l-1)); ``Fg`` is the decoder-path
feature map one level coarser than ``Fl``; ``conv_lhat`` is a kernel-2,
stride-2 convolution so its output matches Fg.
"""
from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, VolumeFormatError
from .tensor import ConvSpec, RunningStats, Tensor

DEPTH = 4
CHECKPOINT_MAGIC = "CSASEG-CHECKPOINT 1"


@dataclass
class NetworkConfig:
    in_channels: int = 1
    n_classes: int = 2
    base_width: int = 8
    csa_levels: tuple[int, ...] = (2, 3)
    csa_inter: int = 0  # CSA intermediate channels; 0 means half of Fl's channels

    def __post_init__(self):
        self.csa_levels = tuple(sorted(set(int(v) for v in self.csa_levels)))
        if not set(self.csa_levels) <= {2, 3}:
            raise ConfigError(f"CSA levels must be a subset of {{2, 3}}, got {self.csa_levels}")
        if self.base_width < 1 or self.n_classes < 2 or self.in_channels < 1:
            raise ConfigError("base_width >= 1, n_classes >= 2 and in_channels >= 1 are required")

    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * 2 ** i for i in range(DEPTH))


class Module:
    """Parameter container: subclasses set Tensor / Module / RunningStats attributes."""

    training = True

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix="") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in vars(self).items():
            if isinstance(val, RunningStats):
                yield f"{prefix}{name}.mean", val.mean
                yield f"{prefix}{name}.var", val.var
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _he(rng, shape, fan_in) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(np.float32), requires_grad=True)


def _zeros(n) -> Tensor:
    return Tensor(np.zeros(n, np.float32), requires_grad=True)


class Conv(Module):
    def __init__(self, spec: ConvSpec, rng, bias=True):
        self.spec = spec
        k = spec.kernel
        self.weight = _he(rng, (spec.out_channels, spec.in_channels, *k), spec.in_channels * int(np.prod(k)))
        self.bias = _zeros(spec.out_channels) if bias else None

    def __call__(self, x):
        return T.conv3d(x, self.weight, self.bias, spec=self.spec)


class ConvBnRelu(Module):
    """3x3x3 conv (no bias: BN removes it) -> batch norm -> ReLU."""

    def __init__(self, cin, cout, rng):
        self.conv = Conv(ConvSpec(cin, cout, 3, 1, 1), rng, bias=False)
        self.gamma = Tensor(np.ones(cout, np.float32), requires_grad=True)
        self.beta = _zeros(cout)
        self.stats = RunningStats.create(cout)

    def __call__(self, x):
        y = self.conv(x)
        return T.relu(T.batch_norm(y, self.gamma, self.beta, self.stats, training=self.training))


class EncoderBlock(Module):
    def __init__(self, level, cin, cout, rng):
        self.level = level
        self.conv1 = ConvBnRelu(cin, cout, rng)
        self.conv2 = ConvBnRelu(cout, cout, rng)

    def __call__(self, x):
        features = self.conv2(self.conv1(x))
        pooled = None if self.level == DEPTH else T.max_pool3d(features)
        return features, pooled


class DecoderBlock(Module):
    """Transposed conv (k3, s2, p1, output_padding 1) -> concat skip -> two Conv-BN-ReLU."""

    def __init__(self, level, cin, cout, rng):
        self.level = level
        self.up_spec = ConvSpec(cin, cout, 3, 2, 1, 1)
        self.up_weight = _he(rng, (cin, cout, 3, 3, 3), cin * 27)
        self.up_bias = _zeros(cout)
        self.conv1 = ConvBnRelu(2 * cout, cout, rng)
        self.conv2 = ConvBnRelu(cout, cout, rng)

    def __call__(self, x, skip):
        up = T.conv_transpose3d(x, self.up_weight, self.up_bias, spec=self.up_spec)
        if up.shape[2:] != skip.shape[2:]:
            raise ShapeError(f"upsampled extents {up.shape[2:]} do not match skip {skip.shape[2:]}; "
                             "input extents must be divisible by 8")
        return self.conv2(self.conv1(T.concat([up, skip], axis=1)))


class CsaModule(Module):
    def __init__(self, level, c1, cl, cg, inter, rng):
        if level < 2:
            raise ConfigError("CSA needs level >= 2")
        self.level = level
        a = 2 ** (level - 1)
        self.align = a
        self.conv_1 = Conv(ConvSpec(c1, inter, a, a, 0), rng)
        self.conv_l = Conv(ConvSpec(cl, inter, 1), rng)
        self.squeeze_1 = Conv(ConvSpec(inter, 1, 1), rng)
        self.conv_g = Conv(ConvSpec(cg, inter, 1), rng)
        self.conv_lhat = Conv(ConvSpec(cl, inter, 2, 2, 0), rng)
        self.squeeze_2 = Conv(ConvSpec(inter, 1, 1), rng)

    def _check(self, f1, fl, fg):
        if f1 is not None and tuple(n // self.align for n in f1.shape[2:]) != tuple(fl.shape[2:]):
            raise ShapeError(f"F1 extents {f1.shape[2:]} must be {self.align}x Fl extents {fl.shape[2:]}")
        if fg is not None and tuple(2 * n for n in fg.shape[2:]) != tuple(fl.shape[2:]):
            raise ShapeError(f"Fg extents {fg.shape[2:]} must be half of Fl extents {fl.shape[2:]}")

    def attention_1(self, f1: Tensor, fl: Tensor, force=None) -> tuple[Tensor, Tensor]:
        """Detail gating of Fl by first-level features; returns (Att1, Fl_hat).

        ``force`` replaces Att1 with a constant (test hook).
        """
        self._check(f1, fl, None)
        att = T.sigmoid(self.squeeze_1(T.relu(self.conv_l(fl) + self.conv_1(f1))))
        if force is not None:
            att = Tensor(np.full(att.shape, force, dtype=att.dtype))
        return att, fl * att

    def attention_2(self, fl_hat: Tensor, fg: Tensor) -> tuple[Tensor, Tensor]:
        """Semantic gating of Fl_hat by coarser decoder features; returns (F_output, Att2)."""
        self._check(None, fl_hat, fg)
        att = T.sigmoid(self.squeeze_2(T.relu(self.conv_g(fg) + self.conv_lhat(fl_hat))))
        return fl_hat * T.upsample_trilinear(att, 2), att

    def __call__(self, f1, fl, fg):
        _, fl_hat = self.attention_1(f1, fl)
        return self.attention_2(fl_hat, fg)[0]


class Network(Module):
    def __init__(self, cfg: NetworkConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or NetworkConfig()
        rng = np.random.default_rng(seed)
        w = cfg.widths()
        self.enc1 = EncoderBlock(1, cfg.in_channels, w[0], rng)
        self.enc2 = EncoderBlock(2, w[0], w[1], rng)
        self.enc3 = EncoderBlock(3, w[1], w[2], rng)
        self.enc4 = EncoderBlock(4, w[2], w[3], rng)
        self.dec3 = DecoderBlock(3, w[3], w[2], rng)
        self.dec2 = DecoderBlock(2, w[2], w[1], rng)
        self.dec1 = DecoderBlock(1, w[1], w[0], rng)
        for level in cfg.csa_levels:
            cl = w[level - 1]
            inter = cfg.csa_inter or max(1, cl // 2)
            # Fg at level l is the bottleneck (l=3) or the level-3 decoder output (l=2)
            setattr(self, f"csa{level}", CsaModule(level, w[0], cl, w[level], inter, rng))
        self.head = Conv(ConvSpec(w[0], cfg.n_classes, 1), rng)

    def csa(self, level) -> CsaModule | None:
        return getattr(self, f"csa{level}", None)

    def logits(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"input must be (N, {self.cfg.in_channels}, D, H, W), got {x.shape}")
        for ax, n in enumerate(x.shape[2:]):
            if n % 8:
                raise ShapeError(f"spatial extent {n} must be divisible by 8", axis=ax + 2)
        f1, p1 = self.enc1(x)
        f2, p2 = self.enc2(p1)
        f3, p3 = self.enc3(p2)
        f4, _ = self.enc4(p3)
        skip3 = self.csa3(f1, f3, f4) if self.csa(3) else f3
        d3 = self.dec3(f4, skip3)
        skip2 = self.csa2(f1, f2, d3) if self.csa(2) else f2
        d2 = self.dec2(d3, skip2)
        d1 = self.dec1(d2, f1)
        return self.head(d1)

    def __call__(self, x: Tensor) -> Tensor:
        return T.softmax_channel(self.logits(x))

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- checkpoints -------------------------------------------------------------------
    def save(self, path):
        """Text manifest (config echo, names, shapes) then TNSR1 snapshots in manifest order."""
        params = list(self.named_parameters())
        buffers = list(self.named_buffers())
        lines = [CHECKPOINT_MAGIC]
        for f in dataclasses.fields(self.cfg):
            v = getattr(self.cfg, f.name)
            v = ",".join(map(str, v)) if isinstance(v, tuple) else v
            lines.append(f"config {f.name}={v}")
        for kind, items in (("param", params), ("buffer", buffers)):
            for name, arr in items:
                shape = arr.shape
                lines.append(f"{kind} {name} " + " ".join(map(str, shape)))
        lines.append("END")
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode())
            for _, p in params:
                T.write_tensor(fh, p.data)
            for _, b in buffers:
                T.write_tensor(fh, b)

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, "rb") as fh:
            if fh.readline().decode().strip() != CHECKPOINT_MAGIC:
                raise VolumeFormatError(f"{path}: not a checkpoint")
            cfg_vals, entries = {}, []
            while True:
                line = fh.readline().decode()
                if not line:
                    raise VolumeFormatError(f"{path}: manifest has no END line")
                line = line.strip()
                if line == "END":
                    break
                kind, rest = line.split(" ", 1)
                if kind == "config":
                    k, v = rest.split("=", 1)
                    cfg_vals[k] = v
                else:
                    name, *shape = rest.split()
                    entries.append((kind, name, tuple(int(s) for s in shape)))
            from .config import build
            net = cls(build(NetworkConfig, cfg_vals))
            params = dict(net.named_parameters())
            buffers = dict(net.named_buffers())
            for kind, name, shape in entries:
                arr = T.read_tensor(fh)
                if arr.shape != shape:
                    raise VolumeFormatError(f"{name}: snapshot shape {arr.shape} != manifest {shape}")
                target = params[name].data if kind == "param" else buffers[name]
                if target.shape != shape:
                    raise VolumeFormatError(f"{name}: checkpoint shape {shape} != model {target.shape}")
                target[...] = arr
        return net


def forward(network: Network, input_patch) -> Tensor:
    x = input_patch if isinstance(input_patch, Tensor) else Tensor(np.asarray(input_patch, np.float32))
    return network(x)
