import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afflab import convnet
from afflab.errors import (CacheMismatch, DivergedGradient, EmptyMask, IncompatibleArchitecture,
                           ShapeMismatch)

import gradcheck


def naive_forward(params, x):
    """Direct sliding-window evaluation of the layer table, one output at a time."""
    h = np.asarray(x, np.float64)
    n_layers = len(convnet.LAYERS)
    for i, (name, cin, cout, k, d, residual, _) in enumerate(convnet.LAYERS):
        w = params[f"{name}.weight"].astype(np.float64)
        b = params[f"{name}.bias"].astype(np.float64)
        C, H, W = h.shape
        r = (k - 1) // 2
        out = np.zeros((cout, H, W))
        for o in range(cout):
            for y in range(H):
                for xx in range(W):
                    acc = b[o]
                    for dy in range(k):
                        for dx in range(k):
                            yy, xs = y + (dy - r) * d, xx + (dx - r) * d
                            if 0 <= yy < H and 0 <= xs < W:
                                acc += np.dot(w[o, :, dy, dx], h[:, yy, xs])
                    out[o, y, xx] = acc
        if residual:
            out = out + h
        h = np.maximum(out, 0) if i < n_layers - 1 else out
    return h[0]


def test_parameter_count_is_pinned():
    # 4*16*9+16 + 2*(16*16*9+16) + 16*32*9+32 + 32*32*9+32 + 32*16*9+16 + 16+1
    assert convnet.init_params(0).size == 23761
    assert sum(convnet.init_params(0)[n].size for n in convnet.init_params(0).names("backbone")) == 19120
    assert len(convnet.LAYERS) == 7


def test_receptive_radius():
    assert convnet.RECEPTIVE_RADIUS == 1 + 2 + 4 + 1 + 2 + 1 + 0


def test_init_is_deterministic_he_normal():
    a, b = convnet.init_params(0), convnet.init_params(0)
    assert a.equal(b)
    assert not a.equal(convnet.init_params(1))
    w = convnet.init_params(3)["L5.weight"]
    assert w.dtype == np.float32
    assert w.std() == pytest.approx(math.sqrt(2 / (32 * 9)), rel=0.05)
    assert all((convnet.init_params(3)[n] == 0).all() for n in a.names() if n.endswith("bias"))


def test_forward_matches_naive_convolution(rng):
    params = convnet.init_params(5)
    for k, v in params.tensors.items():
        if k.endswith("bias"):
            v[...] = rng.normal(0, 0.1, v.shape)
    x = rng.standard_normal((4, 16, 16)).astype(np.float32)
    logits, _ = convnet.forward(params, x)
    assert logits.shape == (16, 16)
    np.testing.assert_allclose(logits, naive_forward(params, x), atol=1e-5, rtol=0)


def test_forward_zero_params_and_determinism(rng):
    zero = convnet.NetParams({k: np.zeros(s, np.float32) for k, s in convnet.param_shapes().items()})
    assert (convnet.forward(zero, np.zeros((4, 9, 9)))[0] == 0).all()
    p = convnet.init_params(0)
    x = rng.standard_normal((2, 4, 10, 11))
    a, _ = convnet.forward(p, x)
    b, _ = convnet.forward(p, x.copy())
    assert a.shape == (2, 10, 11)
    np.testing.assert_array_equal(a, b)


def test_forward_shape_errors():
    p = convnet.init_params(0)
    with pytest.raises(ShapeMismatch):
        convnet.forward(p, np.zeros((3, 16, 16)))
    with pytest.raises(ShapeMismatch):
        convnet.forward(p, np.zeros((4, 7, 16)))


@given(st.integers(0, 2 ** 31 - 1), st.integers(-3, 3), st.integers(-3, 3))
def test_translation_equivariance_in_interior(seed, dy, dx):
    rng = np.random.default_rng(seed)
    p = convnet.init_params(seed % 7)
    x = rng.standard_normal((4, 40, 40)).astype(np.float32)
    shifted = np.zeros_like(x)
    shifted[:, max(dy, 0):40 + min(dy, 0), max(dx, 0):40 + min(dx, 0)] = \
        x[:, max(-dy, 0):40 + min(-dy, 0), max(-dx, 0):40 + min(-dx, 0)]
    a, _ = convnet.forward(p, x)
    b, _ = convnet.forward(p, shifted)
    m = convnet.RECEPTIVE_RADIUS + 3
    np.testing.assert_allclose(b[m + dy:40 - m + dy, m + dx:40 - m + dx], a[m:40 - m, m:40 - m], atol=1e-4)


@given(st.integers(0, 2 ** 31 - 1))
def test_outputs_finite_for_bounded_inputs(seed):
    rng = np.random.default_rng(seed)
    p = convnet.init_params(seed % 5)
    x = rng.uniform(-10, 10, (4, 12, 12)).astype(np.float32)
    logits, cache = convnet.forward(p, x)
    grads = convnet.backward(p, cache, rng.standard_normal(logits.shape).astype(np.float32))
    assert np.isfinite(logits).all()
    assert all(np.isfinite(g).all() for g in grads.values())


def test_bce_closed_forms():
    z = np.array([[0.0, 0.0, 2.0]], np.float32)
    y = np.array([[0, 1, 1]], np.float32)
    rep = convnet.bce_loss_masked(z, y, np.array([[1, 0, 0]]))
    assert rep.loss == pytest.approx(math.log(2), abs=1e-7) and rep.n_active == 1
    rep = convnet.bce_loss_masked(z, y, np.array([[0, 1, 0]]))
    assert rep.loss == pytest.approx(math.log(2), abs=1e-7)
    rep = convnet.bce_loss_masked(z, y, np.array([[0, 0, 1]]))
    assert rep.loss == pytest.approx(0.126928, abs=1e-6)
    rep = convnet.bce_loss_masked(z, y, np.ones((1, 3)))
    np.testing.assert_allclose(rep.grad_logits, (1 / (1 + np.exp(-z)) - y) / 3, rtol=1e-6)


def test_bce_is_stable_for_huge_logits():
    rep = convnet.bce_loss_masked(np.array([[1e4, -1e4]], np.float32), np.array([[0, 1]]), np.ones((1, 2)))
    assert rep.loss == pytest.approx(1e4)
    assert np.isfinite(rep.grad_logits).all()


def test_bce_errors():
    with pytest.raises(EmptyMask):
        convnet.bce_loss_masked(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ShapeMismatch):
        convnet.bce_loss_masked(np.zeros((2, 2)), np.zeros((2, 3)), np.ones((2, 2)))


@given(st.integers(0, 2 ** 31 - 1))
def test_single_pixel_mask_gradient_is_local(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((9, 9)).astype(np.float32)
    mask = np.zeros((9, 9), bool)
    r, c = rng.integers(9, size=2)
    mask[r, c] = True
    g = convnet.bce_loss_masked(z, rng.integers(0, 2, (9, 9)), mask).grad_logits
    assert g[r, c] != 0
    g[r, c] = 0
    assert (g == 0).all()


def test_backward_zero_and_linearity(rng):
    p = convnet.init_params(2)
    x = rng.standard_normal((4, 10, 10)).astype(np.float32)
    logits, cache = convnet.forward(p, x)
    zero = convnet.backward(p, cache, np.zeros_like(logits))
    assert all((g == 0).all() for g in zero.values())
    up = rng.standard_normal(logits.shape).astype(np.float32)
    g1 = convnet.backward(p, cache, up)
    g2 = convnet.backward(p, cache, 2 * up)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-5, atol=1e-6)
    assert set(g1) == set(p.names())


def test_stale_cache_is_rejected(rng):
    p = convnet.init_params(0)
    logits, cache = convnet.forward(p, rng.standard_normal((4, 9, 9)))
    p2, _ = convnet.sgd_step(p, {k: np.ones_like(v) for k, v in p.tensors.items()}, 0.1)
    with pytest.raises(CacheMismatch):
        convnet.backward(p2, cache, np.ones_like(logits))


def test_every_parameter_against_finite_differences():
    """All 23761 coordinates on one 4x12x12 input, eps 1e-3, frozen gates."""
    rng = np.random.default_rng(77)
    params, x, weights = gradcheck.random_case(rng, (12, 12))
    x, weights = x[:1], weights[:1]
    grads, gates = gradcheck.analytic(params, x, weights)
    worst = 0.0
    for name, t in params.tensors.items():
        for idx in np.ndindex(t.shape):
            fd = gradcheck.fd_coord(params, x, gates, weights, name, idx, 1e-3)
            worst = max(worst, float(gradcheck.rel_err(grads[name][idx], fd)))
    assert worst <= 1e-3


def test_raw_finite_differences_at_small_step():
    """Without frozen gates the check still holds once the step is below the kink spacing."""
    rng = np.random.default_rng(3)
    params, x, weights = gradcheck.random_case(rng, (10, 10))
    grads, _ = gradcheck.analytic(params, x, weights)
    for name in ("L1.weight", "L3.bias", "L5.weight", "L7.weight"):
        t = params.tensors[name]
        for f in rng.choice(t.size, 4, replace=False):
            idx = np.unravel_index(f, t.shape)
            fd = gradcheck.fd_coord(params, x, None, weights, name, idx, 1e-6)
            assert gradcheck.rel_err(grads[name][idx], fd, floor=1e-6) <= 1e-4


def test_gradient_check_random_configurations():
    rng = np.random.default_rng(2024)
    for _ in range(5):
        params, x, weights = gradcheck.random_case(rng)
        assert gradcheck.check_case(params, x, weights, rng) <= 1e-3


def test_sgd_step_rule():
    p = convnet.init_params(0)
    zeros = {k: np.zeros_like(v) for k, v in p.tensors.items()}
    same, v = convnet.sgd_step(p, zeros, 0.1, 0.9, zeros)
    assert same.equal(p)
    g = {k: np.ones_like(v) for k, v in p.tensors.items()}
    p1, v1 = convnet.sgd_step(p, g, 0.1, 0.5)
    p2, v2 = convnet.sgd_step(p1, g, 0.1, 0.5, v1)
    np.testing.assert_allclose(v2["L1.bias"], 1.5)
    np.testing.assert_allclose(p2["L1.bias"], p["L1.bias"] - 0.1 - 0.15, rtol=1e-6)
    bad = dict(g)
    bad["L4.weight"] = np.full_like(g["L4.weight"], np.nan)
    with pytest.raises(DivergedGradient):
        convnet.sgd_step(p, bad, 0.1)
    with pytest.raises(ValueError):
        convnet.sgd_step(p, g, 0.0)
    with pytest.raises(ValueError):
        convnet.sgd_step(p, g, 0.1, 1.0)


def test_weights_round_trip_and_tags(tmp_path):
    p = convnet.init_params(9)
    path = tmp_path / "w.anp1"
    convnet.save_params(p, path)
    raw = path.read_bytes()
    assert raw[:4] == b"ANP1"
    back, tags = convnet.loads_params(raw)
    assert back.equal(p)
    assert {n for n, g in tags.items() if g == "head"} == {"L6.weight", "L6.bias", "L7.weight", "L7.bias"}
    assert convnet.dumps_params(back) == raw


def test_weights_corruption_is_incompatible(tmp_path):
    raw = convnet.dumps_params(convnet.init_params(0))
    for bad in (raw[:100], raw + b"x", b"XXXX" + raw[4:], raw[:8] + bytes(32) + raw[40:]):
        with pytest.raises(IncompatibleArchitecture):
            convnet.loads_params(bad)
    with pytest.raises(IncompatibleArchitecture):
        convnet.NetParams({"L1.weight": np.zeros((16, 4, 3, 3))})


def test_group_loading(tmp_path):
    src, base = convnet.init_params(1), convnet.init_params(2)
    convnet.save_params(src, tmp_path / "s.anp1")
    merged, untouched = convnet.load_groups(tmp_path / "s.anp1", ["backbone"], base)
    assert merged.equal(src, src.names("backbone"))
    assert merged.equal(base, base.names("head"))
    assert untouched == base.names("head")
    with pytest.raises(ValueError):
        convnet.merge_groups(src, base, ["tail"])
