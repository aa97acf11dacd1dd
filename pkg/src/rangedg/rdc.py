"""Reflectance distortion calibration.

Reflectance features are re-styled (adaptive-instance-normalisation style):
their per-channel mean/std are swapped for statistics retrieved from a
learnable bank of source-style vectors through cosine attention. During
training the retrieval query is a copy of the features with randomly
perturbed channel statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K

NORM_EPS = 1e-8


@dataclass(frozen=True)
class RdcConfig:
    memory_size: int = 64
    temperature: float = 1.0
    sc_weight: float = 1.0
    sa_weight: float = 1.0

    def __post_init__(self):
        if self.memory_size < 1:
            raise ValueError("memory_size must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def init_memory(size: int, channels: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Standard-normal rows; any row with norm below 1e-3 is redrawn."""
    m = rng.standard_normal((size, channels))
    small = np.linalg.norm(m, axis=1) < 1e-3
    while small.any():
        m[small] = rng.standard_normal((int(small.sum()), channels))
        small = np.linalg.norm(m, axis=1) < 1e-3
    return m.astype(dtype)


def _unit(x: np.ndarray, axis: int):
    """``x / max(|x|, NORM_EPS)`` along ``axis`` with its backward."""
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    big = norm > NORM_EPS
    denom = np.where(big, norm, NORM_EPS)
    y = x / denom

    def back(dy):
        proj = (y * dy).sum(axis=axis, keepdims=True)
        return np.where(big, dy - y * proj, dy) / denom

    return y, back


@dataclass
class Retrieval:
    attention: np.ndarray  # N x T x H x W
    style: np.ndarray  # N x C x H x W
    stats: K.ChannelStats
    zero_norm_pixels: int


def retrieve_style(f: np.ndarray, memory: np.ndarray, mask: np.ndarray, temperature: float = 1.0):
    """Cosine attention of every pixel feature over the memory rows.

    Returns ``(Retrieval, back)``; ``back(dmean, dstd)`` gives
    ``(d f, d memory)`` for gradients arriving through the retrieved stats.
    """
    n, c, h, w = f.shape
    if memory.ndim != 2 or memory.shape[1] != c:
        raise ValueError(f"memory shape {memory.shape} does not match {c} feature channels")
    flat = f.reshape(n, c, h * w)
    fhat, fback = _unit(flat, axis=1)
    mhat, mback = _unit(memory, axis=1)
    sim = np.matmul(mhat, fhat)  # N x T x P
    att, sback = K.softmax_channel(sim / temperature)
    style = np.matmul(memory.T, att)  # N x C x P
    stats, stats_back = K.channel_stats(style.reshape(n, c, h, w), mask)
    zero = int((np.sqrt((flat * flat).sum(axis=1)) <= NORM_EPS).sum())

    def back(dmean, dstd):
        dstyle = stats_back(dmean, dstd).reshape(n, c, h * w)
        dmem = np.matmul(att, dstyle.transpose(0, 2, 1)).sum(axis=0)  # T x C
        datt = np.matmul(memory, dstyle)
        dsim = sback(datt) / temperature
        dmhat = np.matmul(dsim, fhat.transpose(0, 2, 1)).sum(axis=0)
        dfhat = np.matmul(mhat.T, dsim)
        dmem = dmem + mback(dmhat)
        return fback(dfhat).reshape(f.shape), dmem

    ret = Retrieval(att.reshape(n, -1, h, w), style.reshape(n, c, h, w), stats, zero)
    return ret, back


def _restyle(f: np.ndarray, mask: np.ndarray, target_mean: np.ndarray, target_std: np.ndarray):
    """``target_std * (f - mu_f) / sigma_f + target_mean`` on valid pixels, zero elsewhere.

    ``back(dout) -> (d f, d target_mean, d target_std)``.
    """
    stats, sback = K.channel_stats(f, mask)
    m = mask[:, None].astype(f.dtype)
    mu, sd = stats.mean[:, :, None, None], stats.std[:, :, None, None]
    norm = (f - mu) / sd
    out = (norm * target_std[:, :, None, None] + target_mean[:, :, None, None]) * m

    def back(dout):
        dm = dout * m
        dtm = dm.sum(axis=(2, 3))
        dts = (dm * norm).sum(axis=(2, 3))
        dnorm = dm * target_std[:, :, None, None]
        df = dnorm / sd
        dmu = -df.sum(axis=(2, 3))
        dsd = -(dnorm * norm / sd).sum(axis=(2, 3))
        return df + sback(dmu, dsd), dtm, dts

    return out, stats, back


def calibrate(f_ref: np.ndarray, stats_src: K.ChannelStats, mask: np.ndarray) -> np.ndarray:
    out, _, _ = _restyle(f_ref, mask, stats_src.mean, stats_src.std)
    return out


def augment_stats_given(f: np.ndarray, mask: np.ndarray, alpha: np.ndarray, beta: np.ndarray):
    """Re-style ``f`` to mean ``(alpha+0.5) mu`` and std ``(beta+0.5) sigma``.

    ``alpha`` and ``beta`` are ``N x C``. Returns ``(f_aug, back)`` with
    ``back(d f_aug) -> d f``.
    """
    stats, sback = K.channel_stats(f, mask)
    tm, ts = (alpha + 0.5) * stats.mean, (beta + 0.5) * stats.std
    out, _, rback = _restyle(f, mask, tm.astype(f.dtype), ts.astype(f.dtype))

    def back(dout):
        df, dtm, dts = rback(dout)
        return df + sback(dtm * (alpha + 0.5), dts * (beta + 0.5))

    return out, back


def augment_stats(f: np.ndarray, rng: np.random.Generator, mask: np.ndarray) -> np.ndarray:
    alpha = rng.random(f.shape[:2])
    beta = rng.random(f.shape[:2])
    out, _ = augment_stats_given(f, mask, alpha, beta)
    return out


def _l2_rows(x: np.ndarray, axis: int):
    """Euclidean norm along ``axis``; the subgradient at zero is zero."""
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)

    def back(dn):
        return np.where(norm > 0, x / safe, 0.0) * dn

    return np.squeeze(norm, axis), back


def style_losses(f_ref: np.ndarray, stats_src: K.ChannelStats, mask: np.ndarray):
    """Semantic-consistency and style-alignment losses for given retrieved stats.

    Returns ``(calibrated, l_sc, l_sa, back)`` with
    ``back(dcal, g_sc, g_sa) -> (d f_ref, d src_mean, d src_std)``.
    ``l_sc`` is the mean over valid pixels of the per-pixel channel-vector
    distance; ``l_sa`` the batch mean of the mean-gap and std-gap 2-norms.
    """
    cal, ref_stats, rback = _restyle(f_ref, mask, stats_src.mean, stats_src.std)
    _, ref_back = K.channel_stats(f_ref, mask)
    m = mask[:, None].astype(f_ref.dtype)
    count = mask.sum()
    n = f_ref.shape[0]
    diff = (cal - f_ref) * m
    dist, dback = _l2_rows(diff, axis=1)
    l_sc = float(dist.sum() / count)
    gap_mu = stats_src.mean - ref_stats.mean
    gap_sd = stats_src.std - ref_stats.std
    n_mu, mu_back = _l2_rows(gap_mu, axis=1)
    n_sd, sd_back = _l2_rows(gap_sd, axis=1)
    l_sa = float((n_mu + n_sd).sum() / n)

    def back(dcal=None, g_sc=1.0, g_sa=1.0):
        ddiff = dback(np.full(dist.shape, g_sc / count, dtype=f_ref.dtype)[:, None]) * m
        dc = ddiff if dcal is None else dcal + ddiff
        df, dsm, dss = rback(dc)
        df = df - ddiff
        dgm = mu_back(np.full((n, 1), g_sa / n))
        dgs = sd_back(np.full((n, 1), g_sa / n))
        df = df + ref_back(-dgm, -dgs)
        return df, dsm + dgm, dss + dgs

    return cal, l_sc, l_sa, back


def rdc_forward(f_ref: np.ndarray, memory: np.ndarray, mask: np.ndarray, cfg: RdcConfig,
                alpha: np.ndarray | None = None, beta: np.ndarray | None = None):
    """Full calibration path.

    With ``alpha``/``beta`` given (training) the retrieval query is the
    augmented map; without them (inference) it is ``f_ref`` itself. Returns
    ``(calibrated, l_sc, l_sa, retrieval, back)`` where
    ``back(dcal, g_sc, g_sa) -> (d f_ref, d memory)``.
    """
    if alpha is not None:
        query, aback = augment_stats_given(f_ref, mask, alpha, beta)
    else:
        query, aback = f_ref, None
    ret, ret_back = retrieve_style(query, memory, mask, cfg.temperature)
    cal, l_sc, l_sa, lback = style_losses(f_ref, ret.stats, mask)

    def back(dcal=None, g_sc=1.0, g_sa=1.0):
        df, dsm, dss = lback(dcal, g_sc, g_sa)
        dq, dmem = ret_back(dsm, dss)
        df = df + (aback(dq) if aback is not None else dq)
        return df, dmem

    return cal, l_sc, l_sa, ret, back


def rdc_losses(f_ref, memory, rng, mask, cfg: RdcConfig = RdcConfig()):
    """Training-path losses with random augmentation draws: ``(l_sc, l_sa, l_rdc)``."""
    alpha = rng.random(f_ref.shape[:2])
    beta = rng.random(f_ref.shape[:2])
    _, l_sc, l_sa, _, _ = rdc_forward(f_ref, memory, mask, cfg, alpha, beta)
    return l_sc, l_sa, l_sc + l_sa


def rdc_inference(f_ref: np.ndarray, memory: np.ndarray, mask: np.ndarray, cfg: RdcConfig = RdcConfig()):
    cal, _, _, _, _ = rdc_forward(f_ref, memory, mask, cfg)
    return cal
