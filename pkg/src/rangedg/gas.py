"""Geometric abnormality suppression.

A small pixelwise classifier is trained to tell slightly perturbed clean
geometric stem features (label "normal") from standard-Gaussian feature maps
(label "abnormal"). Its normal-class probability then scales the geometric
features pixel by pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K

NORMAL, ABNORMAL = 0, 1


@dataclass(frozen=True)
class GasConfig:
    gamma: float = 0.02
    neg_mean: float = 0.0
    neg_std: float = 1.0
    blocks: int = 2
    hidden: int | None = None  # defaults to the stem width
    slope: float = 0.1
    negatives: int = 1
    stop_gradient: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.neg_std <= 0:
            raise ValueError("neg_std must be > 0")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")


def init_gas_params(channels: int, cfg: GasConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Hidden 1x1 blocks get He-style init; the output layer starts at zero so
    the classifier is exactly uniform before training."""
    hidden = cfg.hidden or channels
    params = {}
    cin = channels
    for i in range(cfg.blocks):
        params[f"gas.l{i}.w"] = K.ParamTensor(
            (rng.standard_normal((hidden, cin)) * np.sqrt(2.0 / cin)).astype(dtype))
        params[f"gas.l{i}.b"] = K.ParamTensor(np.zeros(hidden, dtype=dtype), "bias")
        cin = hidden
    params["gas.out.w"] = K.ParamTensor(np.zeros((2, cin), dtype=dtype))
    params["gas.out.b"] = K.ParamTensor(np.zeros(2, dtype=dtype), "bias")
    return params


def make_positive(f_geo: np.ndarray, gamma: float, rng: np.random.Generator) -> np.ndarray:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if gamma == 0:
        return f_geo.copy()
    return (f_geo + gamma * rng.standard_normal(f_geo.shape)).astype(f_geo.dtype)


def sample_negative(shape, mean: float, std: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    return (mean + std * rng.standard_normal(shape)).astype(dtype)


def abnormality_forward(f: np.ndarray, params: dict, cfg: GasConfig):
    """Return ``(logits, probs, back)``; ``back(dlogits, dprobs)`` accumulates
    parameter gradients and returns the gradient wrt ``f``."""
    backs = []
    x = f
    i = 0
    while f"gas.l{i}.w" in params:
        x, b1 = K.linear_pixelwise(x, params[f"gas.l{i}.w"].value, params[f"gas.l{i}.b"].value)
        x, b2 = K.leaky_relu(x, cfg.slope)
        backs.append((i, b1, b2))
        i += 1
    logits, bout = K.linear_pixelwise(x, params["gas.out.w"].value, params["gas.out.b"].value)
    probs, bsm = K.softmax_channel(logits)

    def back(dlogits=None, dprobs=None):
        d = np.zeros_like(logits) if dlogits is None else dlogits.copy()
        if dprobs is not None:
            d = d + bsm(dprobs)
        d, dw, db = bout(d)
        params["gas.out.w"].grad += dw
        params["gas.out.b"].grad += db
        for j, b1, b2 in reversed(backs):
            d, dw, db = b1(b2(d))
            params[f"gas.l{j}.w"].grad += dw
            params[f"gas.l{j}.b"].grad += db
        return d

    return logits, probs, back


def gas_loss_given(f_geo, params, cfg, mask, eps, negatives):
    """Loss with explicit noise draws: ``eps`` like ``f_geo``, ``negatives`` a
    list of maps. Returns ``(loss, back)`` with ``back(g) -> d f_geo``."""
    if not mask.any():
        raise ValueError("gas_loss needs at least one valid pixel")
    pos = f_geo + cfg.gamma * eps
    batch = np.concatenate([pos] + list(negatives), axis=0)
    n = f_geo.shape[0]
    logits, _, fback = abnormality_forward(batch, params, cfg)
    ignore = ~mask
    loss_pos, bpos = K.cross_entropy(logits[:n], np.full(mask.shape, NORMAL), ignore)
    neg_logits = logits[n:]
    nneg = len(negatives)
    loss_neg, bneg = K.cross_entropy(
        neg_logits, np.full((nneg * n,) + mask.shape[1:], ABNORMAL), np.tile(ignore, (nneg, 1, 1)))

    def back(g=1.0):
        d = np.concatenate([bpos(g), bneg(g)], axis=0)
        dbatch = fback(d)
        return dbatch[:n]

    return loss_pos + loss_neg, back


def gas_loss(f_geo: np.ndarray, params: dict, cfg: GasConfig, rng: np.random.Generator, mask: np.ndarray):
    """Self-supervised loss: CE(positives, normal) + CE(negatives, abnormal) on valid pixels."""
    eps = rng.standard_normal(f_geo.shape).astype(f_geo.dtype)
    negatives = [sample_negative(f_geo.shape, cfg.neg_mean, cfg.neg_std, rng, f_geo.dtype)
                 for _ in range(cfg.negatives)]
    return gas_loss_given(f_geo, params, cfg, mask, eps, negatives)


def gas_weight(f_geo: np.ndarray, params: dict, cfg: GasConfig, mask: np.ndarray):
    """Normal-class probability per pixel (zero on invalid pixels) and the weighted map.

    Returns ``(weight N x H x W, weighted N x C x H x W, back)``;
    ``back(dweighted) -> d f_geo`` also accumulates classifier gradients.
    """
    _, probs, fback = abnormality_forward(f_geo, params, cfg)
    m = mask.astype(f_geo.dtype)
    weight = probs[:, NORMAL] * m
    out = f_geo * weight[:, None]

    def back(dout):
        dweight = (dout * f_geo).sum(axis=1) * m
        dprobs = np.zeros_like(probs)
        dprobs[:, NORMAL] = dweight
        df = dout * weight[:, None]
        return df + fback(None, dprobs)

    return weight, out, back
