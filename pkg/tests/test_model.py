import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegstt import model as M
from eegstt import tensor as tn
from eegstt.errors import ConfigError, ShapeError
from eegstt.gradcheck import gradient_check
from eegstt.tensor import Tensor

SMALL = M.ModelConfig(channels=3, windows=5, bands=2, spatial_dim=4, temporal_dim=4, hidden_dim=6,
                      classes=3, spatial_heads=2, temporal_heads=2, encoder_layers=2, attention_window=3)


def features(n, cfg, seed=0):
    return np.random.default_rng(seed).normal(size=(n, cfg.windows, cfg.channels, cfg.bands)).astype(np.float32)


def as_t(params):
    return M.as_tensors(params)


# ---------------------------------------------------------------- layout

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 1000))
def test_reorganize_spatial_index_law(t, c, b, seed):
    seg = np.random.default_rng(seed).normal(size=(t, c, b))
    x = M.reorganize_spatial(seg)
    assert x.shape == (c, t * b)
    for ti in range(t):
        for ci in range(c):
            for bi in range(b):
                assert x[ci, ti * b + bi] == seg[ti, ci, bi]
    np.testing.assert_array_equal(M.unreorganize_spatial(x, t, b), seg)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(0, 1000))
def test_reorganize_temporal_index_law(t, c, d, seed):
    h = np.random.default_rng(seed).normal(size=(c, t * d))
    x = M.reorganize_temporal(Tensor(h, dtype=np.float64), t).data
    assert x.shape == (t, c * d)
    for ti in range(t):
        for ci in range(c):
            for j in range(d):
                assert x[ti, ci * d + j] == h[ci, ti * d + j]
    back = M.unreorganize_temporal(Tensor(x, dtype=np.float64), c).data
    np.testing.assert_array_equal(back, h)


def test_reorganize_batched_matches_single():
    f = features(4, SMALL)
    batched = M.reorganize_spatial(f)
    for i in range(4):
        np.testing.assert_array_equal(batched[i], M.reorganize_spatial(f[i]))


def test_reorganize_temporal_rejects_bad_width():
    with pytest.raises(ShapeError):
        M.reorganize_temporal(Tensor(np.zeros((2, 7))), 3)


# ---------------------------------------------------------------- masks

def test_mask_tridiagonal():
    expected = [[1, 1, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 1]]
    np.testing.assert_array_equal(M.build_window_mask(4, 3), expected)


def test_mask_width_one_is_identity():
    np.testing.assert_array_equal(M.build_window_mask(5, 1), np.eye(5))


def test_mask_full_width_is_dense():
    np.testing.assert_array_equal(M.build_window_mask(4, 7), np.ones((4, 4)))


@pytest.mark.parametrize("width", [2, 0, 9, -1])
def test_mask_bad_width(width):
    with pytest.raises(ConfigError):
        M.build_window_mask(4, width)


def test_config_rejects_even_window():
    with pytest.raises(ConfigError):
        M.ModelConfig(channels=2, windows=4, attention_window=2)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        M.ModelConfig(channels=2, windows=4, spatial_dim=6, spatial_heads=4)


# ---------------------------------------------------------------- attention

def test_single_channel_attention_weight_is_one():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 8)))
    wq, wk, wv = (Tensor(rng.normal(size=(8, 8))) for _ in range(3))
    out, w = M.attention(x, wq, wk, wv, heads=2, scale_dim=8, return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones((2, 1, 1)))
    np.testing.assert_allclose(out.data, x.data @ wv.data, rtol=1e-6)


def test_attention_weights_are_softmax_of_scaled_scores():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 4))
    wq, wk, wv = (rng.normal(size=(4, 4)) for _ in range(3))
    _, w = M.attention(*(Tensor(a, dtype=np.float64) for a in (x, wq, wk, wv)), heads=1, scale_dim=4,
                       return_weights=True)
    s = (x @ wq) @ (x @ wk).T / math.sqrt(4)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    np.testing.assert_allclose(w.data[0], e / e.sum(axis=1, keepdims=True), rtol=1e-12)


def test_spatial_encoder_channel_permutation_equivariant():
    cfg = SMALL
    params = as_t(M.init_params(cfg, 3))
    x = M.reorganize_spatial(features(2, cfg))
    perm = np.array([2, 0, 1])
    h = M.spatial_encoder_forward(x, params, cfg).data
    hp = M.spatial_encoder_forward(x[:, perm], params, cfg).data
    np.testing.assert_allclose(hp, h[:, perm], atol=1e-5)


def test_masked_positions_have_zero_weight():
    cfg = SMALL
    params = as_t(M.init_params(cfg, 0))
    h_s = M.spatial_encoder_forward(M.reorganize_spatial(features(3, cfg)), params, cfg)
    mask = M.build_window_mask(cfg.windows, cfg.attention_window)
    weights = []
    M.temporal_encoder_forward(M.reorganize_temporal(h_s, cfg.windows), mask, params, cfg, collect=weights)
    assert len(weights) == cfg.encoder_layers
    for w in weights:
        assert np.all(w.data[..., mask == 0] == 0.0)
        assert np.all(w.data[..., mask == 1] > 0.0)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_full_window_equals_dense_bit_for_bit():
    cfg = SMALL
    params = as_t(M.init_params(cfg, 4))
    f = features(4, cfg, seed=2)
    banded = M.forward_batch(f, params, cfg, mask=M.build_window_mask(cfg.windows, 2 * cfg.windows - 1))
    dense = M.forward_batch(f, params, cfg, mask=np.ones((cfg.windows, cfg.windows), dtype=np.uint8))
    assert banded.data.tobytes() == dense.data.tobytes()


def test_dense_mask_equals_unmasked_attention():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 4, 8)))
    ws = [Tensor(rng.normal(size=(8, 8))) for _ in range(3)]
    a = M.attention(x, *ws, heads=2, scale_dim=8)
    b = M.attention(x, *ws, heads=2, scale_dim=8, mask=np.ones((4, 4)))
    assert a.data.tobytes() == b.data.tobytes()


def test_temporal_locality():
    cfg = M.ModelConfig(channels=2, windows=6, bands=2, spatial_dim=4, temporal_dim=4, hidden_dim=4,
                        spatial_heads=2, temporal_heads=2, encoder_layers=1, attention_window=3)
    params = as_t(M.init_params(cfg, 1))
    mask = M.build_window_mask(cfg.windows, 3)
    x = np.random.default_rng(0).normal(size=(cfg.windows, cfg.temporal_width)).astype(np.float32)
    base = M.temporal_encoder_forward(Tensor(x), mask, params, cfg).data
    j = 2
    x2 = x.copy()
    x2[j] += 5.0
    moved = M.temporal_encoder_forward(Tensor(x2), mask, params, cfg).data
    changed = np.any(moved != base, axis=1)
    assert list(np.flatnonzero(changed)) == [1, 2, 3]


# ---------------------------------------------------------------- classifier

def test_zero_output_layer_gives_uniform():
    cfg = SMALL
    params = M.init_params(cfg, 0)
    params["classifier.w2"] = np.zeros_like(params["classifier.w2"])
    probs = M.predict_proba(features(5, cfg), params, cfg)
    np.testing.assert_allclose(probs, 1.0 / cfg.classes, atol=1e-7)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_probabilities_sum_to_one(seed, scale):
    cfg = SMALL
    probs = M.predict_proba(features(3, cfg, seed) * scale, M.init_params(cfg, seed % 7), cfg)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_model_forward_single_segment_matches_batch():
    cfg = SMALL
    params = as_t(M.init_params(cfg, 0))
    f = features(3, cfg)
    batch = M.forward_batch(f, params, cfg).data
    for i in range(3):
        np.testing.assert_allclose(M.model_forward(f[i], params, cfg).data, batch[i], rtol=1e-5, atol=1e-7)


def test_forward_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        M.forward_batch(np.zeros((2, 4, 3, 2)), as_t(M.init_params(SMALL, 0)), SMALL)


# ---------------------------------------------------------------- parameters

def test_init_deterministic_and_bounded():
    a = M.init_params(SMALL, 7)
    b = M.init_params(SMALL, 7)
    assert list(a) == [n for n, _ in M.param_shapes(SMALL)]
    for name, arr in a.items():
        assert arr.dtype == np.float32
        assert arr.tobytes() == b[name].tobytes()
        if name.endswith("ln.gain"):
            assert np.all(arr == 1)
        elif arr.ndim == 1:
            assert np.all(arr == 0)
        else:
            assert np.abs(arr).max() <= 1 / math.sqrt(arr.shape[0])


def test_check_params_catches_bad_shape():
    p = M.init_params(SMALL, 0)
    p["classifier.b2"] = np.zeros(5, dtype=np.float32)
    with pytest.raises(ShapeError):
        M.check_params(p, SMALL)


def test_forward_deterministic():
    p = M.init_params(SMALL, 2)
    f = features(6, SMALL)
    assert M.predict_proba(f, p, SMALL).tobytes() == M.predict_proba(f, p, SMALL).tobytes()


# ---------------------------------------------------------------- gradients

def test_small_model_gradient_check():
    cfg = M.ModelConfig(channels=2, windows=2, bands=2, spatial_dim=4, temporal_dim=4, hidden_dim=4,
                        classes=3, spatial_heads=2, temporal_heads=2, encoder_layers=1, attention_window=1)
    rng = np.random.default_rng(0)
    params = M.init_params(cfg, 0)
    for k, v in params.items():
        if v.ndim == 1:
            params[k] = v + rng.normal(0, 0.1, v.shape).astype(np.float32)
    x = rng.normal(size=(2, 2, 2, 2))
    labels = np.array([0, 2])

    def loss_fn(t):
        return tn.scale(tn.mean_all(tn.log(tn.pick(M.forward_batch(x, t, cfg), labels))), -1.0)

    for r in gradient_check(loss_fn, params):
        assert r.max_rel_error < 1e-4, r.name
