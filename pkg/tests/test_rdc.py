import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rangedg import kernels as K
from rangedg import rdc as R

from oracles import in_convex_hull


def instance(seed, n=2, c=4, h=3, w=3, p_valid=0.7):
    r = np.random.default_rng(seed)
    f = r.standard_normal((n, c, h, w)) * r.uniform(0.5, 2, (n, c, 1, 1)) + r.normal(0, 1, (n, c, 1, 1))
    mask = r.random((n, h, w)) < p_valid
    mask[:, 0, 0] = True
    mask[:, -1, -1] = True
    return f, mask, r


def test_init_memory_rows_nonzero():
    m = R.init_memory(64, 8, np.random.default_rng(0), np.float64)
    assert m.shape == (64, 8) and np.all(np.linalg.norm(m, axis=1) >= 1e-3)


def test_single_row_memory():
    f, mask, _ = instance(1)
    row = np.array([[0.5, -1.0, 2.0, 0.0]])
    ret, _ = R.retrieve_style(f, row, mask)
    np.testing.assert_array_equal(ret.attention, 1.0)
    np.testing.assert_allclose(ret.style, np.broadcast_to(row[0][None, :, None, None], f.shape))
    np.testing.assert_allclose(ret.stats.mean, np.broadcast_to(row, (2, 4)))
    np.testing.assert_array_equal(ret.stats.std, K.EPS_FLOOR)


def test_identical_rows_give_uniform_attention():
    f, mask, _ = instance(2)
    mem = np.tile([[1.0, 2.0, -1.0, 0.5]], (5, 1))
    ret, _ = R.retrieve_style(f, mem, mask)
    np.testing.assert_allclose(ret.attention, 0.2, atol=1e-15)
    np.testing.assert_allclose(ret.style, np.broadcast_to(mem[0][None, :, None, None], f.shape), atol=1e-12)


def test_two_rows_opposite_similarities():
    f = np.zeros((1, 3, 1, 1))
    f[0, 0] = 2.0
    mem = np.array([[1.0, 0, 0], [-3.0, 0, 0]])
    ret, _ = R.retrieve_style(f, mem, np.ones((1, 1, 1), bool))
    np.testing.assert_allclose(ret.attention.ravel(), [0.8808, 0.1192], atol=1e-4)
    a = ret.attention.ravel()
    np.testing.assert_allclose(ret.style.ravel(), a[0] * mem[0] + a[1] * mem[1], atol=1e-12)


def test_zero_norm_pixel_gets_uniform_attention():
    f, mask, r = instance(3)
    f[0, :, 1, 1] = 0.0
    ret, _ = R.retrieve_style(f, r.standard_normal((4, 4)), mask)
    np.testing.assert_allclose(ret.attention[0, :, 1, 1], 0.25)
    assert ret.zero_norm_pixels == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.floats(0.2, 5.0))
def test_attention_laws_and_convex_hull(seed, t, temp):
    f, mask, r = instance(seed, c=5)
    mem = r.standard_normal((t, 5)) * r.uniform(0.1, 3)
    ret, _ = R.retrieve_style(f, mem, mask, temp)
    np.testing.assert_allclose(ret.attention.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(ret.attention >= 0)
    for n in range(f.shape[0]):
        for i in range(f.shape[2]):
            ok, lam = in_convex_hull(ret.style[n, :, i, 0], mem)
            assert ok, lam
            np.testing.assert_allclose(lam, ret.attention[n, :, i, 0], atol=1e-8)


def test_calibrate_hand_example_and_identity():
    x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
    m = np.ones((1, 1, 2), bool)
    out = R.calibrate(x, K.ChannelStats(np.zeros((1, 1)), np.full((1, 1), 2.0)), m)
    np.testing.assert_allclose(out.ravel(), [-2.0, 2.0])
    f, mask, _ = instance(4)
    s, _ = K.channel_stats(f, mask)
    out = R.calibrate(f, s, mask)
    np.testing.assert_allclose(out[np.broadcast_to(mask[:, None], f.shape)],
                               f[np.broadcast_to(mask[:, None], f.shape)], atol=1e-6)
    assert not out[np.broadcast_to(~mask[:, None], f.shape)].any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_calibration_exactness_and_content(seed):
    f, mask, r = instance(seed, n=3, c=4, h=5, w=5)
    target = K.ChannelStats(r.normal(0, 3, (3, 4)), r.uniform(0.01, 4, (3, 4)))
    out = R.calibrate(f, target, mask)
    s_out, _ = K.channel_stats(out, mask)
    np.testing.assert_allclose(s_out.mean, target.mean, atol=1e-5)
    np.testing.assert_allclose(s_out.std, target.std, atol=1e-5)
    s_in, _ = K.channel_stats(f, mask)
    mm = np.broadcast_to(mask[:, None], f.shape)
    np.testing.assert_allclose(K.normalize_channels(out, s_out)[mm], K.normalize_channels(f, s_in)[mm], atol=1e-5)


def test_augment_identity_at_midpoint_and_stats():
    f, mask, r = instance(5)
    half = np.full(f.shape[:2], 0.5)
    out, _ = R.augment_stats_given(f, mask, half, half)
    mm = np.broadcast_to(mask[:, None], f.shape)
    np.testing.assert_allclose(out[mm], f[mm], atol=1e-7)
    a, b = r.random(f.shape[:2]), r.random(f.shape[:2])
    out, _ = R.augment_stats_given(f, mask, a, b)
    s, _ = K.channel_stats(f, mask)
    so, _ = K.channel_stats(out, mask)
    np.testing.assert_allclose(so.mean, (a + 0.5) * s.mean, atol=1e-5)
    np.testing.assert_allclose(so.std, (b + 0.5) * s.std, atol=1e-5)
    np.testing.assert_allclose(K.normalize_channels(out, so)[mm], K.normalize_channels(f, s)[mm], atol=1e-6)
    assert not out[~mm].any()


def test_fixed_point_losses_are_zero():
    f, mask, _ = instance(6)
    s, _ = K.channel_stats(f, mask)
    _, l_sc, l_sa, _ = R.style_losses(f, s, mask)
    assert l_sc < 1e-6 and l_sa == 0.0


def test_inference_equals_midpoint_training_path():
    f, mask, r = instance(7)
    mem = r.standard_normal((6, 4))
    half = np.full(f.shape[:2], 0.5)
    a, *_ = R.rdc_forward(f, mem, mask, R.RdcConfig(), half, half)
    b = R.rdc_inference(f, mem, mask)
    np.testing.assert_allclose(a, b, atol=1e-10)
    ret, _ = R.retrieve_style(f, mem, mask)
    so, _ = K.channel_stats(b, mask)
    np.testing.assert_allclose(so.mean, ret.stats.mean, atol=1e-5)
    np.testing.assert_allclose(so.std, ret.stats.std, atol=1e-5)


@pytest.mark.parametrize("train", [True, False])
def test_rdc_gradcheck(train):
    f, mask, r = instance(8, n=2, c=4, h=3, w=3)
    mem = r.standard_normal((5, 4))
    ab = (r.random((2, 4)), r.random((2, 4))) if train else (None, None)
    probe = r.standard_normal(f.shape)
    cfg = R.RdcConfig(temperature=0.7)

    def loss():
        cal, l_sc, l_sa, _, _ = R.rdc_forward(f, mem, mask, cfg, *ab)
        return float((cal * probe).sum()) + 0.7 * l_sc + 1.3 * l_sa

    *_, back = R.rdc_forward(f, mem, mask, cfg, *ab)
    df, dmem = back(probe, 0.7, 1.3)
    rep = K.grad_check(loss, {"f": f, "memory": mem}, {"f": df, "memory": dmem})
    assert rep.ok(1e-4), rep


def _train_memory(f, mask, augment, steps=300, seed=0):
    from rangedg.net import AdamW

    r = np.random.default_rng(seed)
    mem = K.ParamTensor(R.init_memory(64, f.shape[1], r, np.float64), "memory")
    opt = AdamW({"m": mem}, 0.0)
    half = np.full(f.shape[:2], 0.5)
    hist = []
    for _ in range(steps):
        mem.zero_grad()
        ab = (r.random(f.shape[:2]), r.random(f.shape[:2])) if augment else (half, half)
        *_, l_sa, _, back = R.rdc_forward(f, mem.value, mask, R.RdcConfig(), *ab)
        mem.grad += back(None, 0.0, 1.0)[1]
        opt.step(0.05)
        hist.append(l_sa)
    return np.array(hist)


@pytest.fixture(scope="module")
def clean_ref_features():
    from rangedg.data import to_batch
    from rangedg.net import Model, ModelConfig
    from rangedg.projection import InputStats, ProjectionConfig, project
    from rangedg.weather import SceneConfig, generate_scene

    proj = ProjectionConfig(64, 32)
    pcs = [generate_scene(SceneConfig(seed=100, azimuth_steps=256))]
    batch, _ = to_batch(pcs, proj, InputStats.from_images([project(pcs[0], proj)]))
    model = Model(ModelConfig(channels=16), seed=0, dtype=np.float64)
    f, _ = model.stem("stem_r", batch.ref.astype(np.float64))
    return f, batch.mask


def test_memory_only_training_deterministic_path(clean_ref_features):
    hist = _train_memory(*clean_ref_features, augment=False)
    assert hist[-1] < 0.1 * hist[0]


def test_memory_only_training_augmented_path(clean_ref_features):
    # the query is re-augmented every step, so the loss is noisy; require a clear average decrease
    hist = _train_memory(*clean_ref_features, augment=True)
    assert hist[-20:].mean() < 0.5 * hist[:20].mean()


def test_trained_memory_contracts_style_shifts(clean_ref_features):
    f, mask = clean_ref_features
    r = np.random.default_rng(1)
    mem = K.ParamTensor(R.init_memory(64, f.shape[1], r, np.float64), "memory")
    from rangedg.net import AdamW
    opt = AdamW({"m": mem}, 0.0)
    for _ in range(300):
        mem.zero_grad()
        *_, back = R.rdc_forward(f, mem.value, mask, R.RdcConfig(), r.random(f.shape[:2]), r.random(f.shape[:2]))
        mem.grad += back(None, 0.0, 1.0)[1]
        opt.step(0.05)
    base = R.retrieve_style(f, mem.value, mask)[0].stats
    s_in = K.channel_stats(f, mask)[0]
    # additive style shift of every channel: retrieved means move less than the input means
    for shift in (1.0, 2.0):
        moved = R.retrieve_style(f + shift * mask[:, None], mem.value, mask)[0].stats
        assert np.linalg.norm(moved.mean - base.mean) < shift * np.sqrt(f.shape[1])
    # multiplicative distortion: cosine retrieval is scale invariant
    for scale in (0.5, 2.0):
        moved = R.retrieve_style(f * scale, mem.value, mask)[0].stats
        assert np.linalg.norm(moved.mean - base.mean) < 1e-9 < np.linalg.norm(s_in.mean * (scale - 1))


def test_config_validation():
    with pytest.raises(ValueError):
        R.RdcConfig(memory_size=0)
    with pytest.raises(ValueError):
        R.RdcConfig(temperature=0)
    with pytest.raises(ValueError):
        R.retrieve_style(np.zeros((1, 3, 2, 2)), np.ones((2, 4)), np.ones((1, 2, 2), bool))
