import itertools

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from swseg.errors import CheckpointError, ConfigError, ShapeError
from swseg.train import total_loss, total_loss_grad
from swseg.unet import UNetConfig, build, load_checkpoint, param_count, read_checkpoint, save_checkpoint


def tally(f, k, depth, c_in=3):
    """Closed-form parameter count, written independently of the builder.

    conv: out*in*k*k + out; transposed 2x2: in*out*4 + out; 4 entries per
    batch-normalized channel; 1x1 head.
    """
    ch = [f * 2**i for i in range(depth)]
    conv = lambda i, o, kk: o * i * kk * kk + o
    total, prev = 0, c_in
    for c in ch:
        total += conv(prev, c, k) + conv(c, c, k) + 2 * 4 * c
        prev = c
    for i in range(depth - 1):
        total += ch[i + 1] * ch[i] * 4 + ch[i]
        total += conv(2 * ch[i], ch[i], k) + conv(ch[i], ch[i], k) + 2 * 4 * ch[i]
    return total + conv(ch[0], 1, 1)


def normalized_channels(f, depth):
    ch = [f * 2**i for i in range(depth)]
    return 2 * sum(ch) + 2 * sum(ch[:-1])


def cfg(f=8, k=3, depth=2, lr=0.001):
    return UNetConfig(filters=f, kernel_size=k, learning_rate=lr, depth=depth)


def test_table5_anchor():
    m = build(UNetConfig(filters=32, kernel_size=3, depth=5))
    assert param_count(m) == 7_771_873
    assert m.normalized_channels() == 2944
    assert param_count(m, trainable_only=True) == 7_771_873 - 2 * 2944


@pytest.mark.parametrize("f,k,depth", list(itertools.product([8, 16, 32, 64], [3, 4, 5], [2, 3, 4, 5])))
def test_count_matches_closed_form(f, k, depth):
    m = build(cfg(f, k, depth))
    expected = tally(f, k, depth)
    assert param_count(m) == expected
    assert m.normalized_channels() == normalized_channels(f, depth)
    assert param_count(m, trainable_only=True) == expected - 2 * normalized_channels(f, depth)


def test_head_contribution():
    m = build(UNetConfig(filters=32, kernel_size=3, depth=2))
    assert m.head.weight.size + m.head.bias.size == 33


def test_doubling_filters_roughly_quadruples():
    for f in (8, 16, 32):
        ratio = tally(2 * f, 3, 5) / tally(f, 3, 5)
        assert 3.5 <= ratio <= 4.5


def test_toy_forward_shape_and_range():
    m = build(cfg(8, 3, 2))
    out = m.forward(np.random.default_rng(0).normal(size=(1, 3, 8, 8)))
    assert out.shape == (1, 1, 8, 8)
    assert np.all((out > 0) & (out < 1))


def test_extreme_input_stays_in_open_interval():
    m = build(cfg(8, 3, 2))
    out = m.forward(np.full((1, 3, 8, 8), 1e6))
    assert np.all((out > 0) & (out < 1))


def test_zero_head_gives_half():
    m = build(cfg(8, 3, 2))
    m.head.weight.data[:] = 0
    out = m.forward(np.zeros((2, 3, 8, 8)))
    assert np.all(out == 0.5)


def test_infer_is_deterministic():
    m = build(cfg(8, 4, 3))
    x = np.random.default_rng(1).normal(size=(2, 3, 8, 8))
    np.testing.assert_array_equal(m.forward(x, "infer"), m.forward(x, "infer"))


def test_build_is_seeded():
    a, b = build(cfg(), seed=5), build(cfg(), seed=5)
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


def test_init_conventions():
    m = build(cfg(16, 3, 3))
    for name, t in m.named_tensors():
        if name.endswith("bias") or name.endswith(".shift") or name.endswith("running_mean"):
            assert not t.data.any(), name
        elif name.endswith(".scale") or name.endswith("running_var"):
            assert np.all(t.data == 1), name
        elif name.endswith("weight") and not name.startswith("up"):
            fan_in = t.shape[1] * t.shape[2] * t.shape[3]
            assert np.abs(t.data).max() <= np.sqrt(6 / fan_in), name


def test_channel_mirror_symmetry():
    m = build(cfg(8, 3, 4))
    for i in range(3):
        assert m.encoders[i].out_channels == m.decoders[i].out_channels == 8 * 2**i


def test_indivisible_size_rejected():
    m = build(cfg(8, 3, 3))
    with pytest.raises(ShapeError):
        m.forward(np.zeros((1, 3, 6, 8)))
    with pytest.raises(ShapeError):
        m.forward(np.zeros((1, 1, 8, 8)))


@pytest.mark.parametrize(
    "kwargs",
    [dict(filters=12), dict(kernel_size=2), dict(kernel_size=6), dict(learning_rate=0.1),
     dict(learning_rate=1e-5), dict(depth=1), dict(out_channels=2)],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        UNetConfig(**kwargs).validate()


def test_train_mode_updates_running_stats_only_in_train():
    m = build(cfg())
    x = np.random.default_rng(2).normal(size=(2, 3, 8, 8))
    before = m.encoders[0].norms[0].running_mean.data.copy()
    m.forward(x, "infer")
    np.testing.assert_array_equal(m.encoders[0].norms[0].running_mean.data, before)
    m.forward(x, "train")
    assert not np.array_equal(m.encoders[0].norms[0].running_mean.data, before)


@pytest.mark.parametrize("k", [3, 4])
def test_full_model_gradcheck(k):
    """End-to-end gradient of the training loss w.r.t. sampled parameters and inputs."""
    rng = np.random.default_rng(k)
    m = build(cfg(8, k, 2), seed=k)
    x = rng.normal(size=(2, 3, 4, 4))
    y = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)

    def loss():
        return total_loss(m.forward(x, "train"), y)

    m.zero_grad()
    probs = m.forward(x, "train")
    dx = m.backward(total_loss_grad(probs, y))
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-4
    for name, t in m.trainable():
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        for j in picks:
            old = flat[j]
            flat[j] = old + 1e-5
            fp = loss()
            flat[j] = old - 1e-5
            fm = loss()
            flat[j] = old
            num = (fp - fm) / 2e-5
            assert rel_error(t.grad.reshape(-1)[j], num) < 1e-4, name


def test_checkpoint_round_trip(tmp_path):
    m = build(cfg(8, 5, 3), seed=3)
    x = np.random.default_rng(0).normal(size=(1, 3, 8, 8))
    m.forward(x, "train")  # move the running statistics off their init
    path = tmp_path / "m.swseg"
    save_checkpoint(m, path, extra={"note": 1})
    header, state = read_checkpoint(path)
    assert path.read_bytes().startswith(b"SWSEG1")
    assert header["extra"] == {"note": 1}
    assert set(state) == {n for n, _ in m.named_tensors()}
    m2 = load_checkpoint(path)
    np.testing.assert_array_equal(m2.forward(x), m.forward(x))


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.swseg"
    bad.write_bytes(b"NOTSWSEG")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    m = build(cfg(8, 3, 3))
    path = tmp_path / "m.swseg"
    save_checkpoint(m, path)
    with pytest.raises(CheckpointError):
        build(cfg(8, 3, 2)).load_state_dict(read_checkpoint(path)[1])
    raw = path.read_bytes()
    (tmp_path / "trunc.swseg").write_bytes(raw[:-64])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.swseg")
