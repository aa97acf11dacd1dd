"""Finite-difference checks for every learnable operation, at float64.

Each case returns a ``GradReport``; the acceptance run and the unit tests
share this list.
"""

from __future__ import annotations

import numpy as np

from rangedg import gas as G
from rangedg import kernels as K
from rangedg import rdc as R
from rangedg.net import Batch, Model, ModelConfig, rng_stream


def _rng(seed):
    return np.random.default_rng(seed)


def case_linear():
    r = _rng(1)
    x, w, b = r.standard_normal((2, 3, 4, 4)), r.standard_normal((4, 3)), r.standard_normal(4)
    probe = r.standard_normal((2, 4, 4, 4))
    dx, dw, db = K.linear_pixelwise(x, w, b)[1](probe)
    return K.grad_check(lambda: float((K.linear_pixelwise(x, w, b)[0] * probe).sum()),
                        {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})


def _conv_case(stride):
    r = _rng(2 + stride)
    x, w, b = r.standard_normal((2, 3, 8, 8)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)
    probe = r.standard_normal((2, 4, 8 // stride, 8 // stride))
    dx, dw, db = K.conv3x3(x, w, b, stride)[1](probe)
    return K.grad_check(lambda: float((K.conv3x3(x, w, b, stride)[0] * probe).sum()),
                        {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})


def case_conv_s1():
    return _conv_case(1)


def case_conv_s2():
    return _conv_case(2)


def case_leaky_relu():
    r = _rng(5)
    x = r.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.3
    probe = r.standard_normal(x.shape)
    return K.grad_check(lambda: float((K.leaky_relu(x)[0] * probe).sum()), {"x": x},
                        {"x": K.leaky_relu(x)[1](probe)})


def case_upsample():
    r = _rng(6)
    x = r.standard_normal((2, 3, 4, 4))
    probe = r.standard_normal((2, 3, 8, 8))
    return K.grad_check(lambda: float((K.upsample_nearest2(x)[0] * probe).sum()), {"x": x},
                        {"x": K.upsample_nearest2(x)[1](probe)})


def case_softmax():
    r = _rng(7)
    x = r.standard_normal((2, 4, 4, 4))
    probe = r.standard_normal(x.shape)
    return K.grad_check(lambda: float((K.softmax_channel(x)[0] * probe).sum()), {"x": x},
                        {"x": K.softmax_channel(x)[1](probe)})


def case_channel_stats():
    r = _rng(8)
    x = r.standard_normal((2, 4, 5, 5))
    mask = r.random((2, 5, 5)) > 0.3
    gm, gs = r.standard_normal((2, 2, 4))

    def f():
        s, _ = K.channel_stats(x, mask)
        return float((s.mean * gm).sum() + (s.std * gs).sum())

    return K.grad_check(f, {"x": x}, {"x": K.channel_stats(x, mask)[1](gm, gs)})


def case_cross_entropy():
    r = _rng(9)
    logits = r.standard_normal((2, 4, 4, 4))
    t = r.integers(0, 4, (2, 4, 4))
    ign = r.random((2, 4, 4)) < 0.3
    return K.grad_check(lambda: K.cross_entropy(logits, t, ign)[0], {"logits": logits},
                        {"logits": K.cross_entropy(logits, t, ign)[1]()})


def _gas_params(c, seed):
    r = _rng(seed)
    p = G.init_gas_params(c, G.GasConfig(), r, np.float64)
    p["gas.out.w"].value[...] = r.standard_normal(p["gas.out.w"].shape)
    p["gas.out.b"].value[...] = r.standard_normal(2)
    return p


def case_gas_loss():
    r = _rng(10)
    cfg = G.GasConfig(gamma=0.2)
    f = r.standard_normal((2, 4, 4, 4))
    mask = r.random((2, 4, 4)) > 0.3
    p = _gas_params(4, 11)
    eps, neg = r.standard_normal(f.shape), [r.standard_normal(f.shape)]
    df = G.gas_loss_given(f, p, cfg, mask, eps, neg)[1](1.0)
    analytic = {"f": df, **{k: q.grad.copy() for k, q in p.items()}}
    return K.grad_check(lambda: G.gas_loss_given(f, p, cfg, mask, eps, neg)[0],
                        {"f": f, **{k: q.value for k, q in p.items()}}, analytic)


def case_gas_weight():
    r = _rng(12)
    f = r.standard_normal((2, 4, 4, 4))
    mask = r.random((2, 4, 4)) > 0.3
    p = _gas_params(4, 13)
    probe = r.standard_normal(f.shape)
    df = G.gas_weight(f, p, G.GasConfig(), mask)[2](probe)
    analytic = {"f": df, **{k: q.grad.copy() for k, q in p.items()}}
    return K.grad_check(lambda: float((G.gas_weight(f, p, G.GasConfig(), mask)[1] * probe).sum()),
                        {"f": f, **{k: q.value for k, q in p.items()}}, analytic)


def _rdc_case(train):
    r = _rng(14 + train)
    f = r.standard_normal((2, 4, 4, 4)) * 1.5 + 0.3
    mask = r.random((2, 4, 4)) > 0.3
    mem = r.standard_normal((6, 4))
    ab = (r.random((2, 4)), r.random((2, 4))) if train else (None, None)
    probe = r.standard_normal(f.shape)
    cfg = R.RdcConfig()

    def loss():
        cal, l_sc, l_sa, _, _ = R.rdc_forward(f, mem, mask, cfg, *ab)
        return float((cal * probe).sum()) + l_sc + l_sa

    df, dmem = R.rdc_forward(f, mem, mask, cfg, *ab)[4](probe, 1.0, 1.0)
    return K.grad_check(loss, {"f": f, "memory": mem}, {"f": df, "memory": dmem})


def case_rdc_train():
    return _rdc_case(True)


def case_rdc_inference():
    return _rdc_case(False)


def _toy_batch(seed, n=2, h=8, w=8, k=5):
    r = _rng(seed)
    mask = r.random((n, h, w)) > 0.25
    geo = r.standard_normal((n, 4, h, w)) * mask[:, None]
    ref = r.standard_normal((n, 1, h, w)) * mask[:, None]
    labels = np.where(mask, r.integers(0, k - 1, (n, h, w)), k - 1)
    return Batch(geo, ref, mask, labels)


def _model(cfg, seed=0):
    m = Model(cfg, seed=seed, dtype=np.float64)
    r = _rng(seed + 100)
    # break the zero-initialised output layer so every path carries gradient
    for k in ("gas.out.w", "gas.out.b"):
        if k in m.params:
            m.params[k].value[...] = 0.5 * r.standard_normal(m.params[k].shape)
    return m


def case_stems():
    m = _model(ModelConfig(channels=3, widths=(3, 4, 4)))
    r = _rng(16)
    g, rf = r.standard_normal((2, 4, 8, 8)), r.standard_normal((2, 1, 8, 8))
    pg, pr = r.standard_normal((2, 3, 8, 8)), r.standard_normal((2, 3, 8, 8))

    def loss():
        return float((m.stem("stem_g", g)[0] * pg).sum() + (m.stem("stem_r", rf)[0] * pr).sum())

    m.zero_grad()
    dg = m.stem("stem_g", g)[1](pg)
    dr = m.stem("stem_r", rf)[1](pr)
    names = [k for k in m.params if k.startswith("stem_")]
    return K.grad_check(loss, {"geo": g, "ref": rf, **{k: m.params[k].value for k in names}},
                        {"geo": dg, "ref": dr, **{k: m.params[k].grad.copy() for k in names}})


def case_backbone():
    m = _model(ModelConfig(channels=3, widths=(3, 4, 4), num_classes=2))
    r = _rng(17)
    f = r.standard_normal((1, 3, 8, 8))
    probe = r.standard_normal((1, 2, 8, 8))
    m.zero_grad()
    df = m.backbone(f)[1](probe)
    names = [k for k in m.params if k.startswith(("bb.", "head."))]
    return K.grad_check(lambda: float((m.backbone(f)[0] * probe).sum()),
                        {"f": f, **{k: m.params[k].value for k in names}},
                        {"f": df, **{k: m.params[k].grad.copy() for k in names}})


def sample_params(model, per_module=3, seed=0):
    """A few scalar coordinates from every module's tensors."""
    r = _rng(seed)
    picks = {}
    for name, p in model.params.items():
        picks[name] = r.choice(p.value.size, min(per_module, p.value.size), replace=False)
    return picks


def case_total_loss(cfg: ModelConfig | None = None, seed=18):
    """End-to-end training loss vs sampled parameter coordinates in every module."""
    cfg = cfg or ModelConfig(channels=3, widths=(3, 4, 4), num_classes=4, rdc=R.RdcConfig(memory_size=4),
                             gas=G.GasConfig(gamma=0.1))
    m = _model(cfg, seed)
    batch = _toy_batch(seed)

    def loss():
        return m.forward(batch, train=True, rng=rng_stream(seed, "noise"))[1]["total"]

    m.zero_grad()
    _, _, back = m.forward(batch, train=True, rng=rng_stream(seed, "noise"))
    back()
    picks = sample_params(m, seed=seed)
    per = {}
    worst, worst_name = 0.0, ""
    for name, idx in picks.items():
        p = m.params[name]
        flat = p.value.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + 1e-5
            fp = loss()
            flat[i] = orig - 1e-5
            fm = loss()
            flat[i] = orig
            num = (fp - fm) / 2e-5
            a = p.grad.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-5)
            per[name] = max(per.get(name, 0.0), err)
            if err >= worst:
                worst, worst_name = err, name
    return K.GradReport(worst, worst_name, per)


def case_total_loss_baseline():
    return case_total_loss(ModelConfig.baseline(channels=3, widths=(3, 4, 4), num_classes=4), seed=19)


def case_fuse_split():
    """The gradient of a fused sum reaches both branches unchanged."""
    r = _rng(20)
    a, b = r.standard_normal((1, 3, 4, 4)), r.standard_normal((1, 3, 4, 4))
    probe = r.standard_normal(a.shape)
    from rangedg.net import fuse
    return K.grad_check(lambda: float((fuse(a, b) * probe).sum()), {"a": a, "b": b}, {"a": probe, "b": probe})


CASES = {
    "linear_pixelwise": case_linear,
    "conv3x3_stride1": case_conv_s1,
    "conv3x3_stride2": case_conv_s2,
    "leaky_relu": case_leaky_relu,
    "upsample_nearest2": case_upsample,
    "softmax_channel": case_softmax,
    "channel_stats": case_channel_stats,
    "cross_entropy": case_cross_entropy,
    "gas_loss": case_gas_loss,
    "gas_weight": case_gas_weight,
    "rdc_train_path": case_rdc_train,
    "rdc_inference_path": case_rdc_inference,
    "stems": case_stems,
    "fuse": case_fuse_split,
    "backbone_head": case_backbone,
    "total_loss_full": case_total_loss,
    "total_loss_baseline": case_total_loss_baseline,
}


def run_all() -> dict:
    return {name: fn() for name, fn in CASES.items()}


