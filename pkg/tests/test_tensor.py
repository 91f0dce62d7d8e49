import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import numeric_grad, projected, rel_error
from swseg import tensor as T
from swseg.errors import ConfigError, ShapeError


def conv_params(w, b):
    return T.LayerParams(T.Tensor(np.asarray(w, float)), T.Tensor(np.asarray(b, float)))


def bn_params(scale, shift):
    return T.BatchNormParams(T.Tensor(np.asarray(scale, float)), T.Tensor(np.asarray(shift, float)))


def brute_conv(x, w, b):
    """Direct loop convolution with the same padding rule."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    lo, hi = T.same_padding(k)
    xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    out = np.zeros((n, o, h, wd))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, :, i : i + k, j : j + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w) + b
    return out


# -- conv2d ---------------------------------------------------------------------


def test_conv_identity_1x1():
    out = T.conv2d(np.array([[[[5.0]]]]), conv_params([[[[1.0]]]], [0.0]))
    assert out.tolist() == [[[[5.0]]]]


def test_conv_ones_center_and_corner():
    out = T.conv2d(np.ones((1, 1, 3, 3)), conv_params(np.ones((1, 1, 3, 3)), [0.0]))
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == out[0, 0, 0, 2] == out[0, 0, 2, 0] == out[0, 0, 2, 2] == 4


def test_conv_zero_weights_gives_bias():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    out = T.conv2d(x, conv_params(np.zeros((4, 3, 3, 3)), [1.0, 2.0, 3.0, -1.0]))
    for o, b in enumerate([1.0, 2.0, 3.0, -1.0]):
        assert np.all(out[:, o] == b)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_conv_matches_brute_force(k):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(2, 3, 7, 6))
    w, b = rng.normal(size=(4, 3, k, k)), rng.normal(size=4)
    np.testing.assert_allclose(T.conv2d(x, conv_params(w, b)), brute_conv(x, w, b), atol=1e-12)


def test_same_padding_even_kernel_pads_bottom_right():
    assert T.same_padding(4) == (1, 2)
    assert T.same_padding(3) == (1, 1)
    with pytest.raises(ConfigError):
        T.same_padding(0)


def test_conv_shape_errors():
    p = conv_params(np.zeros((2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError, match="channel"):
        T.conv2d(np.zeros((1, 2, 4, 4)), p)
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((2, 4, 4)), p)
    with pytest.raises(ShapeError):
        T.conv2d_backward(np.zeros((1, 3, 4, 4)), p, np.zeros((1, 2, 4, 5)))


def test_conv_backward_identity_case():
    x = np.array([[[[5.0]]]])
    dx, dw, db = T.conv2d_backward(x, conv_params([[[[1.0]]]], [0.0]), np.ones((1, 1, 1, 1)))
    assert dx.ravel().tolist() == [1.0]
    assert dw.ravel().tolist() == [5.0]
    assert db.tolist() == [1.0]


def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 4, 4))
    p = conv_params(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    for g in T.conv2d_backward(x, p, np.zeros((1, 3, 4, 4))):
        assert not g.any()


def test_conv_linear_in_input():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 5, 5))
    p = conv_params(rng.normal(size=(2, 2, 3, 3)), np.zeros(2))
    np.testing.assert_allclose(T.conv2d(2.5 * x, p), 2.5 * T.conv2d(x, p), rtol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_conv_gradcheck(k):
    rng = np.random.default_rng(10 + k)
    x = rng.normal(size=(1, 2, 4, 4))
    w, b = rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
    p = conv_params(w, b)
    up = rng.normal(size=(1, 3, 4, 4))
    dx, dw, db = T.conv2d_backward(x, p, up)
    f = projected(lambda: T.conv2d(x, p), up)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4
    assert rel_error(dw, numeric_grad(f, p.weight.data)) < 1e-4
    assert rel_error(db, numeric_grad(f, p.bias.data)) < 1e-4


# -- transposed conv ------------------------------------------------------------


def test_tconv_expands_single_pixel():
    out = T.transposed_conv2(np.ones((1, 1, 1, 1)), conv_params(np.ones((1, 1, 2, 2)), [0.0]))
    assert out.shape == (1, 1, 2, 2) and np.all(out == 1)


def test_tconv_zero_input_gives_bias():
    out = T.transposed_conv2(np.zeros((2, 3, 2, 3)), conv_params(np.ones((3, 2, 2, 2)), [0.5, -2.0]))
    assert out.shape == (2, 2, 4, 6)
    assert np.all(out[:, 0] == 0.5) and np.all(out[:, 1] == -2.0)


def test_tconv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.transposed_conv2(np.zeros((1, 2, 2, 2)), conv_params(np.ones((3, 1, 2, 2)), [0.0]))


def test_tconv_gradcheck():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 3, 4, 4))
    p = conv_params(rng.normal(size=(3, 2, 2, 2)), rng.normal(size=2))
    up = rng.normal(size=(1, 2, 8, 8))
    dx, dw, db = T.transposed_conv2_backward(x, p, up)
    f = projected(lambda: T.transposed_conv2(x, p), up)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4
    assert rel_error(dw, numeric_grad(f, p.weight.data)) < 1e-4
    assert rel_error(db, numeric_grad(f, p.bias.data)) < 1e-4


# -- maxpool --------------------------------------------------------------------


def test_maxpool_hand_case():
    out, idx = T.maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.ravel().tolist() == [4.0]
    assert idx.ravel().tolist() == [3]


def test_maxpool_tie_takes_first():
    out, idx = T.maxpool2(np.full((1, 1, 2, 2), 7.0))
    assert out.ravel().tolist() == [7.0] and idx.ravel().tolist() == [0]


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[[[1.0, 9.0], [3.0, 4.0]]]])
    _, idx = T.maxpool2(x)
    g = T.maxpool2_backward(np.array([[[[2.5]]]]), idx)
    assert g.tolist() == [[[[0.0, 2.5], [0.0, 0.0]]]]


def test_maxpool_odd_size_rejected():
    with pytest.raises(ShapeError):
        T.maxpool2(np.zeros((1, 1, 3, 4)))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_maxpool_dominates_window(seed):
    x = np.random.default_rng(seed).normal(size=(2, 3, 6, 4))
    out, _ = T.maxpool2(x)
    windows = x.reshape(2, 3, 3, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(2, 3, 3, 2, 4)
    assert np.all(out[..., None] >= windows)
    np.testing.assert_array_equal(out, windows.max(-1))


# -- concat ---------------------------------------------------------------------


def test_concat_order_and_round_trip():
    a = np.zeros((1, 1, 2, 2))
    b = np.ones((1, 1, 2, 2))
    c = T.concat_channels(a, b)
    assert c.shape == (1, 2, 2, 2)
    assert np.all(c[:, 0] == 0) and np.all(c[:, 1] == 1)
    a2, b2 = T.split_channels(c, 1)
    np.testing.assert_array_equal(a2, a)
    np.testing.assert_array_equal(b2, b)


def test_concat_backward_partitions_grad():
    g = np.arange(2 * 5 * 3 * 3, dtype=float).reshape(2, 5, 3, 3)
    ga, gb = T.split_channels(g, 2)
    assert ga.shape == (2, 2, 3, 3) and gb.shape == (2, 3, 3, 3)
    np.testing.assert_array_equal(np.concatenate([ga, gb], 1), g)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        T.concat_channels(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


# -- batchnorm ------------------------------------------------------------------


def test_batchnorm_standardizes():
    x = np.random.default_rng(4).normal(3.0, 5.0, size=(4, 3, 5, 5))
    out, _ = T.batchnorm(x, T.BatchNormParams.identity(3))
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batchnorm_affine():
    x = np.random.default_rng(5).normal(size=(4, 2, 6, 6))
    out, _ = T.batchnorm(x, bn_params([2.0, 2.0], [3.0, 3.0]))
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-4)


def test_batchnorm_running_stats_and_infer():
    rng = np.random.default_rng(6)
    x = rng.normal(1.0, 2.0, size=(3, 2, 4, 4))
    p = T.BatchNormParams.identity(2)
    T.batchnorm(x, p, "train", momentum=0.1)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    np.testing.assert_allclose(p.running_mean.data, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(p.running_var.data, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    before = (p.running_mean.data.copy(), p.running_var.data.copy())
    out, _ = T.batchnorm(x, p, "infer")
    np.testing.assert_array_equal(p.running_mean.data, before[0])
    expected = (x - before[0][None, :, None, None]) / np.sqrt(before[1][None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_batchnorm_bad_eps_and_channels():
    with pytest.raises(ConfigError):
        T.batchnorm(np.zeros((1, 1, 2, 2)), T.BatchNormParams.identity(1), eps=0.0)
    with pytest.raises(ShapeError):
        T.batchnorm(np.zeros((1, 2, 2, 2)), T.BatchNormParams.identity(3))


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_batchnorm_gradcheck(mode):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 4, 4))
    p = bn_params(rng.uniform(0.5, 2, 3), rng.normal(size=3))
    p.running_mean.data[:] = rng.normal(size=3)
    p.running_var.data[:] = rng.uniform(0.5, 2, 3)
    up = rng.normal(size=x.shape)
    out, cache = T.batchnorm(x, p, mode)
    dx, ds, db = T.batchnorm_backward(up, p, cache)
    f = projected(lambda: T.batchnorm(x, p, mode)[0], up)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4
    assert rel_error(ds, numeric_grad(f, p.scale.data)) < 1e-4
    assert rel_error(db, numeric_grad(f, p.shift.data)) < 1e-4


# -- activations ----------------------------------------------------------------


def test_activation_values():
    assert T.relu(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]
    assert T.sigmoid(np.array([0.0]))[0] == 0.5
    sm = T.softmax_channels(np.zeros((1, 4, 2, 2)))
    np.testing.assert_allclose(sm, 0.25)


def test_sigmoid_open_interval_for_extreme_inputs():
    s = T.sigmoid(np.array([-1e4, -800.0, 40.0, 800.0, 1e4]))
    assert np.all(s > 0) and np.all(s < 1) and np.all(np.isfinite(s))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_softmax_sums_to_one(seed):
    x = np.random.default_rng(seed).normal(0, 30, size=(2, 5, 3, 3))
    np.testing.assert_allclose(T.softmax_channels(x).sum(1), 1.0, atol=1e-12)


def test_activation_gradchecks():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 4, 8, 8))
    x[np.abs(x) < 1e-3] = 0.5  # stay off the ReLU kink
    up = rng.normal(size=x.shape)
    checks = [
        (T.relu, lambda: T.relu_backward(up, T.relu(x))),
        (T.sigmoid, lambda: T.sigmoid_backward(up, T.sigmoid(x))),
        (T.softmax_channels, lambda: T.softmax_channels_backward(up, T.softmax_channels(x))),
    ]
    for fwd, bwd in checks:
        assert rel_error(bwd(), numeric_grad(projected(lambda: fwd(x), up), x)) < 1e-4, fwd.__name__


def test_tensor_container():
    t = T.Tensor(np.ones((2, 3)))
    assert t.shape == (2, 3) and t.size == 6
    t.zero_grad()
    assert t.grad.shape == (2, 3) and not t.grad.any()
    frozen = T.Tensor(np.ones(2), requires_grad=False)
    frozen.zero_grad()
    assert frozen.grad is None
    with pytest.raises(ShapeError):
        T.Tensor(np.ones(2), grad=np.ones(3))
