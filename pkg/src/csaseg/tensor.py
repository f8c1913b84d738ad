"""Dense N-D tensors with tape-based reverse-mode differentiation.

Only the operators the segmentation network needs are provided: 3D
convolution and its transpose, 2x2x2 max pooling, batch normalization,
ReLU / sigmoid / channel softmax, trilinear upsampling, concatenation and
elementwise arithmetic.  Feature maps use the ``(N, C, D, H, W)`` layout.

Data is float32 by default.  Operators follow numpy promotion, so a graph
built from float64 leaves is evaluated in float64; :func:`grad_check` uses
that to run its finite differences in double precision.
"""
from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError, VolumeFormatError

DEFAULT_DTYPE = np.float32
_DEBUG = bool(os.environ.get("CSASEG_DEBUG"))
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, Iterable):
        t = tuple(int(a) for a in v)
        if len(t) != 3:
            raise ValueError(f"expected 3 values, got {t}")
        return t
    return (int(v),) * 3


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autograd ----------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return tsum(self, axis, keepdims) * (1.0 / n)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by a forward op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(out), (a,), backward)


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over axis 1 (channels)."""
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError("softmax_channel needs at least 2 channels", axis=1)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), backward)


# -- convolution -------------------------------------------------------------
@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3D (transposed) convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    output_padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        for f in ("kernel", "stride", "padding", "output_padding"):
            object.__setattr__(self, f, _triple(getattr(self, f)))
        if min(self.stride) < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if min(self.kernel) < 1:
            raise ShapeError(f"kernel must be >= 1, got {self.kernel}")

    def output_extents(self, extents: Sequence[int], transposed: bool = False) -> tuple[int, ...]:
        out = []
        for ax, (n, k, s, p, op) in enumerate(zip(extents, self.kernel, self.stride,
                                                   self.padding, self.output_padding)):
            m = (n - 1) * s - 2 * p + k + op if transposed else (n + 2 * p - k) // s + 1
            if m < 1:
                raise ShapeError(f"spatial axis {ax + 2}: extent {n} yields empty output", axis=ax + 2)
            out.append(m)
        return tuple(out)


_AXIS_NAMES = ("N", "C", "D", "H", "W")


def _check_conv_operands(x: Tensor, w: Tensor, b: Tensor | None, in_axis: int):
    if x.ndim != 5:
        raise ShapeError(f"input must be 5-D (N,C,D,H,W), got {x.ndim}-D")
    if w.ndim != 5:
        raise ShapeError(f"weights must be 5-D, got {w.ndim}-D")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(
            f"axis C: input has {x.shape[1]} channels, weights expect {w.shape[in_axis]}", axis=1)
    if b is not None and b.shape != (w.shape[1 - in_axis],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[1 - in_axis]},)", axis=1)


def _windows(xp: np.ndarray, k, s) -> np.ndarray:
    """Partial im2col over the H and W axes only.

    Returns an (N, Dp, Ho*Wo, C*kh*kw) array; the depth taps are applied
    later as shifted slices along axis 1, which keeps memory at 9x instead
    of 27x the input for 3x3x3 kernels.
    """
    win = sliding_window_view(xp, k[1:], axis=(3, 4))[:, :, :, ::s[1], ::s[2]]
    n, c, dp, ho, wo = win.shape[:5]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6))
    return cols.reshape(n, dp, ho * wo, c * k[1] * k[2])


def _depth_tap(cols: np.ndarray, n: int, a: int, do: int, sd: int) -> np.ndarray:
    return cols[n, a:a + sd * (do - 1) + 1:sd].reshape(-1, cols.shape[-1])


def _correlate(xp: np.ndarray, w: np.ndarray, s):
    """out[n,o,i] = sum_c,k w[o,c,k] xp[n,c,s*i+k]; returns (out, cols) for reuse."""
    o, c, kd, kh, kw = w.shape
    cols = _windows(xp, (kd, kh, kw), s)
    n = xp.shape[0]
    do = (xp.shape[2] - kd) // s[0] + 1
    ho = (xp.shape[3] - kh) // s[1] + 1
    wo = (xp.shape[4] - kw) // s[2] + 1
    wt = w.transpose(2, 1, 3, 4, 0).reshape(kd, c * kh * kw, o)
    out = np.empty((n, do * ho * wo, o), dtype=np.result_type(xp, w))
    for b in range(n):
        acc = _depth_tap(cols, b, 0, do, s[0]) @ wt[0]
        for a in range(1, kd):
            acc += _depth_tap(cols, b, a, do, s[0]) @ wt[a]
        out[b] = acc
    out = out.reshape(n, do, ho, wo, o).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(out), cols


def _correlate_weight_grad(cols: np.ndarray, g: np.ndarray, wshape, s) -> np.ndarray:
    """Gradient of :func:`_correlate` w.r.t. ``w`` given the cached ``cols``."""
    o, c, kd, kh, kw = wshape
    n, _, do = g.shape[:3]
    gl = g.transpose(0, 2, 3, 4, 1).reshape(n, -1, o)
    acc = np.zeros((kd, c * kh * kw, o), dtype=np.result_type(cols, g))
    for b in range(n):
        for a in range(kd):
            acc[a] += _depth_tap(cols, b, a, do, s[0]).T @ gl[b]
    return np.ascontiguousarray(acc.reshape(kd, c, kh, kw, o).transpose(4, 1, 0, 2, 3))


def _scatter(g: np.ndarray, w: np.ndarray, s, full_shape) -> np.ndarray:
    """Adjoint of :func:`_correlate` w.r.t. its input.

    ``g`` is (N, O, ...), ``w`` is (O, C, k...); returns an (N, C, *full_shape)
    array.  Computed as a correlation of the zero-dilated ``g`` with the
    flipped, channel-swapped kernel.
    """
    k = w.shape[2:]
    n, o = g.shape[:2]
    if any(si > 1 for si in s):
        dil = np.zeros((n, o) + tuple(si * (m - 1) + 1 for si, m in zip(s, g.shape[2:])), dtype=g.dtype)
        dil[:, :, ::s[0], ::s[1], ::s[2]] = g
        g = dil
    gp = np.pad(g, ((0, 0), (0, 0)) + tuple((ki - 1, ki - 1) for ki in k))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    out, _ = _correlate(gp, wf, (1, 1, 1))
    extra = [f - m for f, m in zip(full_shape, out.shape[2:])]
    if any(extra):
        out = np.pad(out, ((0, 0), (0, 0)) + tuple((0, e) for e in extra))
    return out


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           spec: ConvSpec | None = None) -> Tensor:
    """Cross-correlation with zero padding; weights are (out_c, in_c, kd, kh, kw)."""
    if spec is not None:
        stride, padding = spec.stride, spec.padding
        if weight.shape[:2] != (spec.out_channels, spec.in_channels) or weight.shape[2:] != spec.kernel:
            raise ShapeError(f"weights {weight.shape} do not match {spec}")
    s, p = _triple(stride), _triple(padding)
    _check_conv_operands(x, weight, bias, in_axis=1)
    k = weight.shape[2:]
    ConvSpec(x.shape[1], weight.shape[0], k, s, p).output_extents(x.shape[2:])
    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((q, q) for q in p)) if any(p) else x.data
    out, cols = _correlate(xp, weight.data, s)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    padded_shape = xp.shape[2:]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _scatter(g, weight.data, s, padded_shape)
            gx = gx[:, :, p[0]:p[0] + x.shape[2], p[1]:p[1] + x.shape[3], p[2]:p[2] + x.shape[4]]
        if weight.requires_grad:
            gw = _correlate_weight_grad(cols, g, weight.shape, s)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=2, padding=1,
                     output_padding=1, spec: ConvSpec | None = None) -> Tensor:
    """Transposed convolution (adjoint of strided conv3d); weights are (in_c, out_c, kd, kh, kw)."""
    if spec is not None:
        stride, padding, output_padding = spec.stride, spec.padding, spec.output_padding
    s, p, op = _triple(stride), _triple(padding), _triple(output_padding)
    for ax in range(3):
        if op[ax] >= s[ax]:
            raise ShapeError(f"output_padding {op[ax]} must be smaller than stride {s[ax]}", axis=ax + 2)
    _check_conv_operands(x, weight, bias, in_axis=0)
    k = weight.shape[2:]
    out_ext = ConvSpec(x.shape[1], weight.shape[1], k, s, p, op).output_extents(x.shape[2:], transposed=True)
    full = tuple(max((n - 1) * si + ki, pi + m) for n, si, ki, pi, m in zip(x.shape[2:], s, k, p, out_ext))
    buf = _scatter(x.data, weight.data, s, full)
    out = np.ascontiguousarray(buf[:, :, p[0]:p[0] + out_ext[0], p[1]:p[1] + out_ext[1], p[2]:p[2] + out_ext[2]])
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    core = tuple((n - 1) * si + ki for n, si, ki in zip(x.shape[2:], s, k))

    def backward(g):
        gfull = np.zeros(g.shape[:2] + full, dtype=g.dtype)
        gfull[:, :, p[0]:p[0] + out_ext[0], p[1]:p[1] + out_ext[1], p[2]:p[2] + out_ext[2]] = g
        gfull = gfull[:, :, :core[0], :core[1], :core[2]]
        gx, cols = _correlate(gfull, weight.data, s)
        gw = gb = None
        if weight.requires_grad:
            # dW[ci,co,k] = sum_n,i x[n,ci,i] * gfull[n,co,s*i+k]
            gw = _correlate_weight_grad(cols, x.data, weight.shape, s)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


# -- pooling / normalization / resampling ------------------------------------
def max_pool3d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first voxel in scan order."""
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    k = window
    n, c, d, h, w = x.shape
    for ax, ext in zip((2, 3, 4), (d, h, w)):
        if ext % k:
            raise ShapeError(f"axis {_AXIS_NAMES[ax]}: extent {ext} not divisible by {k}; pad the input",
                             axis=ax)
    blocks = x.data.reshape(n, c, d // k, k, h // k, k, w // k, k).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, d // k, h // k, w // k, k ** 3)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, d // k, h // k, w // k, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(x.shape),)

    return _make(out, (x,), backward)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, DEFAULT_DTYPE), np.ones(channels, DEFAULT_DTYPE))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats | None = None,
               training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, D, H, W).

    In training mode batch statistics are used and ``running`` (if given) is
    updated in place with the unbiased batch variance.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)", axis=1)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running is not None:
            m = x.data.size // c
            unbiased = var * (m / max(m - 1, 1))
            running.mean[:] = (1 - momentum) * running.mean + momentum * mu
            running.var[:] = (1 - momentum) * running.var + momentum * unbiased
    else:
        if running is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        mu, var = running.mean, running.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    out = out.astype(np.result_type(x.data, gamma.data), copy=False)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        if training:
            m = x.data.size // c
            gx = (gamma.data * inv).reshape(bshape) / m * (
                m * g - gbeta.reshape(bshape) - xhat * gg.reshape(bshape))
        else:
            gx = g * (gamma.data * inv).reshape(bshape)
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), backward)


def _linear_interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """(n_in*factor, n_in) matrix of half-pixel-centered linear interpolation."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m.astype(dtype)


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Separable trilinear upsampling of the spatial axes (align_corners=False)."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    mats = [_linear_interp_matrix(n, factor, x.dtype) for n in x.shape[2:]]
    out = x.data
    for ax, m in zip((2, 3, 4), mats):
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [ax])), 0, ax)

    def backward(g):
        for ax, m in zip((2, 3, 4), mats):
            g = np.moveaxis(np.tensordot(m.T, g, axes=([1], [ax])), 0, ax)
        return (np.ascontiguousarray(g),)

    return _make(np.ascontiguousarray(out), (x,), backward)


# -- gradient checking ---------------------------------------------------------
def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
               coords: int | None = None, seed: int = 0, floor: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` takes no arguments and builds its scalar output from ``params``.
    The analytic gradient is taken at the parameters' own precision; the
    finite differences re-evaluate ``f`` with every parameter promoted to
    float64.  If ``coords`` is given, that many coordinates are sampled at
    random across all parameters, otherwise every coordinate is checked.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f()
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("function is not finite at the check point")
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]

    originals = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    sizes = [p.size for p in params]
    total = sum(sizes)
    if coords is None:
        picks = [(i, j) for i, s in enumerate(sizes) for j in range(s)]
    else:
        flat = np.random.default_rng(seed).choice(total, size=min(coords, total), replace=False)
        offsets = np.cumsum([0] + sizes)
        picks = [(int(np.searchsorted(offsets, c, side="right") - 1),) for c in flat]
        picks = [(i, int(c - offsets[i])) for (i,), c in zip(picks, flat)]

    worst = 0.0
    try:
        with no_grad():
            for i, j in picks:
                flat_view = params[i].data.reshape(-1)
                orig = flat_view[j]
                flat_view[j] = orig + h
                fp = f().item()
                flat_view[j] = orig - h
                fm = f().item()
                flat_view[j] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError("function is not finite near the check point")
                num = (fp - fm) / (2 * h)
                ana = analytic[i].reshape(-1)[j]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    finally:
        for p, o in zip(params, originals):
            p.data = o
    return worst


# -- snapshot I/O ----------------------------------------------------------------
TENSOR_MAGIC = b"TNSR1"


def write_tensor(fh, array: np.ndarray):
    """Append one snapshot: ``TNSR1 <ndim> <extents...>\\n`` then little-endian float32 data."""
    array = np.asarray(array)
    header = b" ".join([TENSOR_MAGIC, str(array.ndim).encode()] + [str(n).encode() for n in array.shape])
    fh.write(header + b"\n")
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor(fh) -> np.ndarray:
    line = fh.readline()
    if not line:
        raise VolumeFormatError("unexpected end of file while reading tensor header")
    parts = line.split()
    if not parts or parts[0] != TENSOR_MAGIC:
        raise VolumeFormatError(f"bad tensor magic {parts[:1]!r}")
    ndim = int(parts[1])
    shape = tuple(int(v) for v in parts[2:2 + ndim])
    if len(shape) != ndim:
        raise VolumeFormatError("tensor header has fewer extents than ndim")
    count = int(np.prod(shape, dtype=np.int64))
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise VolumeFormatError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
