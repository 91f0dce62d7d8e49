import math

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from swseg.data import SynthSpec, generate, split
from swseg.errors import ConfigError, NumericError, ShapeError
from swseg.tensor import Tensor
from swseg.train import (
    AdamState, EpochRecord, TrainSettings, TrainTrace, adam_step, bce_loss, bce_loss_grad, binarize,
    dice_loss, dice_loss_grad, pooled_dsc, total_loss, total_loss_grad, train,
)
from swseg.unet import UNetConfig, build

HALF = np.array([[1.0, 1.0], [0.0, 0.0]])


# -- losses ---------------------------------------------------------------------


def test_dice_examples():
    assert dice_loss(HALF, HALF) <= 1e-6
    assert dice_loss(1 - HALF, HALF) == pytest.approx(1.0, abs=1e-6)
    assert dice_loss(np.full((2, 2), 0.5), HALF, smooth=0.0) == 0.5


def test_bce_examples():
    assert bce_loss(np.full((3, 3), 0.5), np.eye(3)) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(np.array([0.25]), np.array([1.0])) == pytest.approx(-math.log(0.25), abs=1e-12)
    assert bce_loss(HALF, HALF) < 1e-6


def test_total_loss_weightings():
    rng = np.random.default_rng(0)
    p, t = rng.uniform(0.01, 0.99, (4, 4)), (rng.random((4, 4)) > 0.5).astype(float)
    assert total_loss(p, t, 1.0, 0.0) == dice_loss(p, t)
    assert total_loss(p, t, 0.0, 1.0) == bce_loss(p, t)
    assert total_loss(np.full((2, 2), 0.5), HALF) == pytest.approx(0.25 + 0.5 * math.log(2), abs=1e-6)
    assert total_loss(np.full((2, 2), 0.5), HALF) == pytest.approx(0.5966, abs=1e-4)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        bce_loss(np.zeros(3), np.zeros(4))


def test_loss_ranges():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p, t = rng.random((5, 5)), (rng.random((5, 5)) > 0.5).astype(float)
        assert 0 <= dice_loss(p, t) <= 1 + 1e-6
        assert bce_loss(p, t) >= 0


def test_bce_clamp_has_zero_grad():
    g = bce_loss_grad(np.array([0.0, 1.0, 0.5]), np.array([1.0, 0.0, 1.0]))
    assert g[0] == 0 and g[1] == 0 and g[2] != 0


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradchecks(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, (4, 4))
    t = (rng.random((4, 4)) > 0.5).astype(float)
    for f, g in [
        (lambda: dice_loss(p, t), dice_loss_grad(p, t)),
        (lambda: bce_loss(p, t), bce_loss_grad(p, t)),
        (lambda: total_loss(p, t, 0.3, 0.7), total_loss_grad(p, t, 0.3, 0.7)),
    ]:
        assert rel_error(g, numeric_grad(f, p)) < 1e-4


def test_binarize_idempotent_on_hard_masks():
    m = (np.random.default_rng(2).random((6, 6)) > 0.5).astype(float)
    np.testing.assert_array_equal(binarize(m), m.astype(bool))
    assert pooled_dsc(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


# -- adam -----------------------------------------------------------------------


def test_adam_first_step():
    p = Tensor(np.array([0.0]))
    adam_step([p], AdamState(), 0.001, grads=[np.array([1.0])])
    assert p.data[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_grad_keeps_params_and_decays_moments():
    p = Tensor(np.array([1.0, 2.0]))
    s = adam_step([p], AdamState(), 0.01, grads=[np.array([1.0, -1.0])])
    m_before, v_before, x_before = s.m[0].copy(), s.v[0].copy(), p.data.copy()
    adam_step([p], s, 0.01, grads=[np.zeros(2)])
    np.testing.assert_allclose(s.m[0], 0.9 * m_before)
    np.testing.assert_allclose(s.v[0], 0.999 * v_before)
    # With m decayed but non-zero the step is not zero; only a fresh state is inert.
    q = Tensor(np.array([1.0, 2.0]))
    adam_step([q], AdamState(), 0.01, grads=[np.zeros(2)])
    np.testing.assert_array_equal(q.data, [1.0, 2.0])
    assert not np.array_equal(p.data, x_before)


def test_adam_deterministic_and_lr_checked():
    a, b = Tensor(np.ones(3)), Tensor(np.ones(3))
    g = [np.array([0.1, -0.2, 0.3])]
    adam_step([a], AdamState(), 0.01, grads=g)
    adam_step([b], AdamState(), 0.01, grads=g)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(ConfigError):
        adam_step([a], AdamState(), 0.0, grads=g)


# -- settings and trace -----------------------------------------------------------


@pytest.mark.parametrize(
    "kw", [dict(epochs=0), dict(batch_size=0), dict(alpha=-1), dict(alpha=0, beta=0), dict(threshold=1.0)]
)
def test_settings_validation(kw):
    with pytest.raises(ConfigError):
        TrainSettings(**kw).validate()


def test_trace_csv_round_trip(tmp_path):
    tr = TrainTrace([EpochRecord(1, 0.5, 0.25, 0.125, 0.01), EpochRecord(2, 0.4, 0.3, 0.2, 0.02)])
    tr.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "epoch,train_loss,train_dsc,val_dsc,seconds"
    back = TrainTrace.from_csv(tmp_path / "t.csv")
    assert back.epochs == tr.epochs


# -- training loop ----------------------------------------------------------------


def tiny_data(n=8, size=16, seed=0):
    ds = generate(SynthSpec(count=n, size=size, radius=(2.0, 4.0), seed=seed))
    return split(ds, 0.75, seed)


def test_smoke_one_epoch_one_sample():
    tr, va = tiny_data(4)
    model = build(UNetConfig(8, 3, 0.001, depth=2))
    res = train(model, tr[:1], va, TrainSettings(epochs=1, batch_size=4))
    assert len(res.trace) == 1
    rec = res.trace.epochs[0]
    assert all(math.isfinite(v) for v in (rec.train_loss, rec.train_dsc, rec.val_dsc))
    assert res.best_epoch == 1 and 0 <= res.best_val_dsc <= 1


def test_empty_split_rejected():
    tr, va = tiny_data(4)
    with pytest.raises(ConfigError):
        train(build(UNetConfig(8, 3, 0.001, depth=2)), tr[:0], va, TrainSettings(epochs=1))


def test_nonfinite_loss_aborts_with_location():
    tr, va = tiny_data(4)
    model = build(UNetConfig(8, 3, 0.001, depth=2))
    bad = (tr.images().copy(), tr.masks())
    bad[0][0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="epoch 1, batch 0"):
        train(model, bad, va, TrainSettings(epochs=1))


def test_same_seed_same_trace():
    tr, va = tiny_data(8)
    traces = []
    for _ in range(2):
        res = train(build(UNetConfig(8, 3, 0.003, depth=2), seed=1), tr, va, TrainSettings(epochs=2, batch_size=3))
        traces.append([(e.epoch, e.train_loss, e.train_dsc, e.val_dsc) for e in res.trace.epochs])
    assert traces[0] == traces[1]


def test_learning_progress_on_synthetic_data():
    ds = generate(SynthSpec(count=50, size=64, seed=0))
    tr, va = split(ds, 0.8, 0)
    res = train(build(UNetConfig(8, 3, 0.005, depth=3)), tr, va, TrainSettings(epochs=20, batch_size=16))
    dsc = res.trace.column("train_dsc")
    assert len(dsc) == 20
    assert dsc[-1] > dsc[0]
