"""Dense-grid numeric kernels with explicit backward passes.

Every differentiable kernel follows the same calling convention::

    out, back = kernel(x, ...)
    dx, *dparams = back(dout)

Arrays are batched ``N x C x H x W``; validity masks are ``N x H x W`` booleans.
All kernels are dtype-generic: training runs in float32, the gradient-check
harness in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

EPS_FLOOR = 1e-5


@dataclass
class ParamTensor:
    value: np.ndarray
    role: str = "weight"  # weight | bias | memory
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass
class ChannelStats:
    """Per-sample, per-channel mean and (floored) population std, each ``N x C``."""

    mean: np.ndarray
    std: np.ndarray


def _check_4d(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be N x C x H x W, got shape {x.shape}")


def linear_pixelwise(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """1x1 convolution: ``out[n,c,h,w] = sum_k weight[c,k] x[n,k,h,w] + bias[c]``."""
    _check_4d(x)
    n, cin, h, w = x.shape
    if weight.ndim != 2 or weight.shape[1] != cin:
        raise ValueError(f"weight shape {weight.shape} incompatible with {cin} input channels")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} must be ({weight.shape[0]},)")
    flat = x.reshape(n, cin, h * w)
    out = np.matmul(weight, flat) + bias[None, :, None]

    def back(dout):
        d = dout.reshape(n, -1, h * w)
        dw = np.matmul(d, flat.transpose(0, 2, 1)).sum(axis=0)
        db = d.sum(axis=(0, 2))
        dx = np.matmul(weight.T, d).reshape(x.shape)
        return dx, dw, db

    return out.reshape(n, -1, h, w), back


def _im2col(xp: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, 3, 3, ho, wo), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * 9, ho * wo)


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1):
    """3x3 convolution with zero padding 1; stride 1 keeps H x W, stride 2 halves it."""
    _check_4d(x)
    n, cin, h, w = x.shape
    if weight.ndim != 4 or weight.shape[1:] != (cin, 3, 3):
        raise ValueError(f"weight shape {weight.shape} incompatible with {cin} input channels")
    cout = weight.shape[0]
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} must be ({cout},)")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if stride == 2 and (h % 2 or w % 2):
        raise ValueError(f"stride-2 convolution needs even H and W, got {h}x{w}")
    ho, wo = h // stride, w // stride
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, ho, wo, stride)
    w2 = weight.reshape(cout, -1)
    out = np.matmul(w2, cols) + bias[None, :, None]

    def back(dout):
        d = dout.reshape(n, cout, ho * wo)
        dw = np.matmul(d, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        db = d.sum(axis=(0, 2))
        dcols = np.matmul(w2.T, d).reshape(n, cin, 3, 3, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        return dxp[:, :, 1:-1, 1:-1], dw, db

    return out.reshape(n, cout, ho, wo), back


def leaky_relu(x: np.ndarray, slope: float = 0.1):
    # x == 0 counts as the positive side, so the subgradient there is 1
    pos = x >= 0
    out = np.where(pos, x, slope * x)

    def back(dout):
        return np.where(pos, dout, slope * dout)

    return out, back


def upsample_nearest2(x: np.ndarray):
    _check_4d(x)
    out = x.repeat(2, axis=2).repeat(2, axis=3)

    def back(dout):
        n, c, h, w = dout.shape
        return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))

    return out, back


def softmax_channel(x: np.ndarray, axis: int = 1):
    """Softmax over the channel axis, stabilised by per-pixel max subtraction."""
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(dout):
        return y * (dout - (dout * y).sum(axis=axis, keepdims=True))

    return y, back


def channel_stats(x: np.ndarray, mask: np.ndarray, eps: float = EPS_FLOOR):
    """Population mean/std per sample and channel over valid pixels.

    ``back(dmean, dstd)`` returns the gradient wrt ``x``. Where the std is
    clamped to ``eps`` its gradient is zero.
    """
    _check_4d(x)
    if mask.shape != (x.shape[0],) + x.shape[2:]:
        raise ValueError(f"mask shape {mask.shape} does not match feature map {x.shape}")
    m = mask[:, None].astype(x.dtype)
    count = m.sum(axis=(2, 3))
    if np.any(count == 0):
        raise ValueError("channel_stats needs at least one valid pixel per sample")
    mean = (x * m).sum(axis=(2, 3)) / count
    centered = (x - mean[:, :, None, None]) * m
    var = (centered ** 2).sum(axis=(2, 3)) / count
    raw = np.sqrt(var)
    above = raw > eps
    std = np.where(above, raw, eps).astype(x.dtype)

    def back(dmean, dstd):
        dvar = np.where(above, dstd / (2 * np.where(above, raw, 1.0)), 0.0)
        dx = m * (dmean / count)[:, :, None, None] + centered * (2 * dvar / count)[:, :, None, None]
        return dx.astype(x.dtype, copy=False)

    return ChannelStats(mean, std), back


def normalize_channels(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return (x - stats.mean[:, :, None, None]) / stats.std[:, :, None, None]


def denormalize_channels(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return x * stats.std[:, :, None, None] + stats.mean[:, :, None, None]


def cross_entropy(logits: np.ndarray, targets: np.ndarray, ignore: np.ndarray | None = None):
    """Mean negative log-likelihood over non-ignored pixels.

    ``ignore`` is a boolean ``N x H x W`` mask of excluded pixels. Returns the
    scalar loss and ``back(g=1.0) -> dlogits``.
    """
    _check_4d(logits, "logits")
    n, k, h, w = logits.shape
    if targets.shape != (n, h, w):
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    keep = np.ones((n, h, w), dtype=bool) if ignore is None else ~ignore
    if not keep.any():
        raise ValueError("cross_entropy: every pixel is ignored")
    t = np.where(keep, targets, 0).astype(np.int64)
    if np.any(t < 0) or np.any(t >= k):
        raise ValueError(f"target class ids must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, t[:, None], axis=1)[:, 0]
    total = keep.sum()
    loss = float(((lse - picked) * keep).sum() / total)

    def back(g=1.0):
        p = np.exp(z - lse[:, None])
        np.put_along_axis(p, t[:, None], np.take_along_axis(p, t[:, None], axis=1) - 1, axis=1)
        return (p * keep[:, None] * (g / total)).astype(logits.dtype, copy=False)

    return loss, back


@dataclass
class GradReport:
    max_rel_error: float
    worst: str
    per_input: dict[str, float]

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` wrt ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def grad_check(
    f: Callable[[], float],
    inputs: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    step: float = 1e-5,
    floor: float = 1e-5,
) -> GradReport:
    """Compare analytic gradients against central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the
    report carries the worst value over every element of every input.
    """
    per = {}
    for name, x in inputs.items():
        if x.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 inputs; {name} is {x.dtype}")
        num = numerical_grad(f, x, step)
        a = np.asarray(analytic[name], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        per[name] = float(np.max(np.abs(a - num) / denom)) if num.size else 0.0
    worst = max(per, key=per.get)
    return GradReport(per[worst], worst, per)
