import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from minconv.approx import (
    EXACT, INFER, MIN_APPROX, TRAIN, AbsMeanStats, ApproxConvLayer, approx_conv_forward, clip, clip_grad,
    exact_conv_backward, filter_abs_mean, normalize_mode, rescale_weights, smin, update_running_mu,
)
from minconv.errors import DegenerateInputError, DimensionError, ZeroFilterError, ZeroInputStatisticsError
from minconv.tensor import Shape2D, conv2d
from oracles import approx_conv_loops, direct_conv, smin_table

reals = st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=False)


def test_smin_examples():
    assert smin(0.5, 2.0) == 0.5
    assert smin(-3.0, 2.0) == -2.0
    for x in (-4.0, -1e-9, 0.0, 3.0):
        assert smin(x, 0.0) == 0.0


def test_smin_commutes_on_random_pairs(rng):
    a, b = rng.standard_normal((2, 1000)) * 5
    np.testing.assert_array_equal(smin(a, b), smin(b, a))


@given(reals, reals)
def test_smin_sign_magnitude_form(a, b):
    sign = lambda v: 1.0 if v >= 0 else -1.0
    assert smin(a, b) == sign(a) * sign(b) * min(abs(a), abs(b))
    assert smin(a, b) == smin_table(a, b)


@given(reals, reals)
def test_smin_is_odd(a, b):
    assume(a != 0)
    assert smin(-a, b) == -smin(a, b)


@given(reals, reals, st.floats(1, 10), st.floats(1, 10))
def test_smin_monotone_in_magnitude(a, b, sa, sb):
    assert abs(smin(a, b)) <= abs(smin(a * sa, b * sb))


def test_clip_and_gradient():
    assert (clip(5, 2), clip(-5, 2), clip(1, 2)) == (2, -2, 1)
    assert (clip_grad(5, 2), clip_grad(1, 2), clip_grad(2, 2), clip_grad(-2, 2), clip_grad(-2.001, 2)) == (0, 1, 1, 1, 0)
    with pytest.raises(ValueError):
        clip(1.0, -1.0)
    with pytest.raises(ValueError):
        clip_grad(1.0, -1.0)


@given(reals, st.floats(0, 1e6))
def test_clip_idempotent(x, alpha):
    assert clip(clip(x, alpha), alpha) == clip(x, alpha)


def test_rescale_weights():
    w = np.array([[1.0, -1.0]])
    np.testing.assert_array_equal(rescale_weights(w, AbsMeanStats(np.array([1.0]), 1.0)), w)
    np.testing.assert_array_equal(rescale_weights(w, AbsMeanStats(np.array([1.0]), 2.0)), [[2.0, -2.0]])


def test_rescale_weights_elementwise(rng):
    w = rng.standard_normal((4, 2, 3, 3))
    mu_w = filter_abs_mean(w)
    got = rescale_weights(w, AbsMeanStats(mu_w, 0.7))
    for idx in np.ndindex(w.shape):
        assert got[idx] == pytest.approx(w[idx] * 0.7 / mu_w[idx[0]], rel=1e-14)


def test_rescale_weights_errors():
    w = np.zeros((2, 1, 1, 1))
    w[0] = 1.0
    with pytest.raises(ZeroFilterError):
        rescale_weights(w, AbsMeanStats(filter_abs_mean(w), 1.0))
    with pytest.raises(ZeroInputStatisticsError):
        rescale_weights(np.ones((1, 1, 1, 1)), AbsMeanStats(np.ones(1), 0.0))
    with pytest.raises(DimensionError):
        rescale_weights(np.ones((2, 1, 1, 1)), AbsMeanStats(np.ones(3), 1.0))


def test_update_running_mu():
    x = np.full((2, 3), -2.0)
    s, mu = update_running_mu(AbsMeanStats(np.ones(1), 1.0, gamma=0.0), x)
    assert s.mu_x_running == 2.0 and mu == 2.0
    s, _ = update_running_mu(AbsMeanStats(np.ones(1), 1.0, gamma=1.0), x)
    assert s.mu_x_running == 1.0
    s, _ = update_running_mu(AbsMeanStats(np.ones(1), 1.0, gamma=0.9), x)
    assert s.mu_x_running == pytest.approx(1.1, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        update_running_mu(s, np.zeros((0, 3)))


@given(st.floats(0, 1), st.floats(0, 100), st.floats(0, 100))
def test_running_mu_is_contraction(gamma, old, batch):
    s, _ = update_running_mu(AbsMeanStats(np.ones(1), old, gamma), np.array([batch]))
    lo, hi = min(old, batch), max(old, batch)
    assert lo - 1e-9 <= s.mu_x_running <= hi + 1e-9


def test_stats_validation():
    with pytest.raises(ValueError):
        AbsMeanStats(np.ones(1), 0.0, gamma=1.5)
    with pytest.raises(ValueError):
        AbsMeanStats(-np.ones(1))
    assert normalize_mode("approx") == MIN_APPROX
    with pytest.raises(ValueError):
        normalize_mode("binary")


def _approx_layer(w, mu_x, bias=None, s=None):
    layer = ApproxConvLayer(w, s or Shape2D(w.shape[2], w.shape[3]), bias=bias, mode=MIN_APPROX)
    layer.prepare(mu_x)
    return layer


def test_approx_forward_zero_input(backend, rng):
    layer = _approx_layer(rng.standard_normal((3, 2, 3, 3)), 1.0)
    assert not np.any(approx_conv_forward(np.zeros((1, 2, 5, 5)), layer))


def test_approx_forward_hand_example(backend):
    layer = _approx_layer(np.array([[[[0.5]]]]), 2.0)
    np.testing.assert_array_equal(layer.w_tilde, [[[[2.0]]]])
    z = approx_conv_forward(np.array([[[[2.0]]]]), layer)
    assert z.item() == 1.0 == 2.0 * 0.5


def test_approx_forward_matches_loop_oracle(backend, rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    layer = _approx_layer(w, float(np.abs(x).mean()), bias=b)
    got = approx_conv_forward(x, layer)
    want = approx_conv_loops(x, layer.w_tilde, layer.stats.mu_w, bias=b)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_approx_exact_at_normalized_coincidence(backend, rng):
    a, m = 0.8, 0.3
    x = a * rng.choice([-1.0, 1.0], size=(2, 3, 6, 6))
    w = m * rng.choice([-1.0, 1.0], size=(4, 3, 3, 3))
    s = Shape2D(3, 3, 1, 1)
    layer = _approx_layer(w, a, s=s)
    got = approx_conv_forward(x, layer)
    np.testing.assert_allclose(got, conv2d(x, w, s), rtol=0, atol=1e-14)


def test_exact_mode_reproduces_im2col(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    s = Shape2D.same(3)
    layer = ApproxConvLayer(w, s, mode=EXACT)
    np.testing.assert_allclose(approx_conv_forward(x, layer), conv2d(x, w, s), atol=1e-9)
    np.testing.assert_allclose(layer.forward(x, TRAIN), direct_conv(x, w, 1, 1), atol=1e-9)


def test_approx_forward_needs_prepare(rng):
    layer = ApproxConvLayer(rng.standard_normal((1, 1, 1, 1)), Shape2D(1, 1), mode=MIN_APPROX)
    with pytest.raises(RuntimeError):
        approx_conv_forward(np.ones((1, 1, 2, 2)), layer)
    with pytest.raises(DimensionError):
        approx_conv_forward(np.ones((1, 2, 2, 2)), layer)


def test_exact_backward_zero_and_scalar():
    s = Shape2D(1, 1)
    gx, gw = exact_conv_backward(np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1)), np.ones((1, 1, 1, 1)), s)
    assert not gx.any() and not gw.any()
    x, w, g = 1.5, -0.25, 3.0
    gx, gw = exact_conv_backward(np.full((1, 1, 1, 1), g), np.full((1, 1, 1, 1), x), np.full((1, 1, 1, 1), w), s)
    assert gx.item() == g * w and gw.item() == g * x
    with pytest.raises(DimensionError):
        exact_conv_backward(np.zeros((1, 2, 1, 1)), np.ones((1, 1, 1, 1)), np.ones((1, 1, 1, 1)), s)


def _fd(f, arr, h=1e-5):
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


@pytest.mark.parametrize("s", [Shape2D(3, 3, 1, 1), Shape2D(2, 2, 2, 0)])
def test_exact_backward_matches_finite_differences(rng, s):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, s.fh, s.fw))
    g = rng.standard_normal((2, 3) + s.output_size(5, 5))
    gx, gw = exact_conv_backward(g, x, w, s)
    f = lambda: float((conv2d(x, w, s) * g).sum())
    for ana, num in ((gx, _fd(f, x)), (gw, _fd(f, w))):
        assert np.max(np.abs(ana - num) / np.maximum(np.abs(num), 1e-6)) < 1e-4


def test_layer_train_and_infer_phases(backend, rng):
    w = rng.standard_normal((2, 1, 3, 3))
    layer = ApproxConvLayer(w, Shape2D.same(3), mode=MIN_APPROX)
    layer.stats.gamma = 0.5
    layer.stats.mu_x_running = 1.0
    x = 3.0 * rng.standard_normal((2, 1, 5, 5))
    layer.forward(x, TRAIN)
    mu_b = np.abs(x).mean()
    assert layer.mu_x == pytest.approx(mu_b)
    assert layer.stats.mu_x_running == pytest.approx(0.5 + 0.5 * mu_b)
    assert np.abs(layer._cache["x"]).max() <= 2 * mu_b + 1e-12
    frozen = layer.stats.mu_x_running
    z = layer.forward(x, INFER)
    assert layer.stats.mu_x_running == frozen and layer.mu_x == frozen
    np.testing.assert_array_equal(layer._cache["x"], x)  # no clipping at inference
    want = approx_conv_loops(x, layer.w_tilde, layer.stats.mu_w, pad=1)
    np.testing.assert_allclose(z, want, atol=1e-9)


def test_layer_backward_masks_clipped_entries(rng):
    w = rng.standard_normal((2, 1, 3, 3))
    w[0, 0, 0, 0] = 50.0  # far beyond 2 * mu_w
    layer = ApproxConvLayer(w, Shape2D.same(3), mode=MIN_APPROX)
    x = rng.standard_normal((1, 1, 5, 5))
    x[0, 0, 2, 2] = 40.0
    z = layer.forward(x, TRAIN)
    gx, gw, gb = layer.backward(np.ones_like(z))
    assert gw[0, 0, 0, 0] == 0.0 and gx[0, 0, 2, 2] == 0.0
    assert np.count_nonzero(gw) > 0 and np.count_nonzero(gx) > 0
    np.testing.assert_allclose(gb, z[0].size / z.shape[1] * np.ones(2))
    with pytest.raises(RuntimeError):
        ApproxConvLayer(w, Shape2D.same(3)).backward(np.ones_like(z))
