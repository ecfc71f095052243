import math

import numpy as np
import pytest

from sovnet import tensor as T
from sovnet.data import Dataset, synthetic_shapes
from sovnet.network import SOVNet, micro_config
from sovnet.tensor import ShapeMismatch, Tensor
from sovnet.training import (LabelOutOfRange, MarginPhase, MarginSchedule, OptimState, adam_step, evaluate,
                             gradcheck, margin_loss, metrics_csv, reconstruction_loss, total_loss, train)


def micro(seed=0, **kw):
    return SOVNet(micro_config(**kw), seed=seed, dtype=np.float64)


def micro_data(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.uniform(0, 1, size=(n, 1, 5, 5)), np.arange(n) % 2, classes=2)


# -- margin schedule and loss --------------------------------------------------------

def test_schedule_constants_and_switch():
    s = MarginSchedule(epochs=10)
    assert s.phase(0) == MarginPhase(0.9, 0.1, 0.5)
    assert s.phase(4) == MarginPhase(0.9, 0.1, 0.5)
    assert s.phase(5) == MarginPhase(0.95, 0.05, 0.8)
    assert MarginSchedule(epochs=3).phase(1) == MarginPhase(0.9, 0.1, 0.5)
    assert MarginSchedule(epochs=3).phase(2) == MarginPhase(0.95, 0.05, 0.8)
    with pytest.raises(ValueError):
        MarginPhase(0.1, 0.9, 0.5)


def test_margin_loss_examples():
    assert float(margin_loss(np.array([0.9, 0.1, 0.1]), 0).data) == 0.0
    got = float(margin_loss(np.array([0.0, 0.5, 0.1, 0.1]), 0).data)
    assert got == pytest.approx(0.9 ** 2 + 0.5 * 0.4 ** 2, abs=1e-15)
    assert got == pytest.approx(0.89, abs=1e-12)


def test_margin_loss_phase_two():
    sched = MarginSchedule(epochs=2)
    got = float(margin_loss(np.array([0.5, 0.25]), 0, sched, epoch=1).data)
    assert got == pytest.approx(0.45 ** 2 + 0.8 * 0.2 ** 2, abs=1e-15)


def test_margin_loss_batch_mean():
    s = np.array([[0.0, 0.5], [0.9, 0.1]])
    assert float(margin_loss(s, [0, 0]).data) == pytest.approx((0.81 + 0.5 * 0.16) / 2, abs=1e-15)


def test_margin_loss_monotone():
    rng = np.random.default_rng(0)
    h = 1e-4
    for _ in range(50):
        s = rng.uniform(0.02, 0.98, size=5)
        base = float(margin_loss(s, 2).data)
        for k in range(5):
            up = s.copy()
            up[k] += h
            d = float(margin_loss(up, 2).data) - base
            assert d <= 1e-15 if k == 2 else d >= -1e-15


def test_margin_loss_errors():
    with pytest.raises(LabelOutOfRange):
        margin_loss(np.array([0.1, 0.2]), 2)
    with pytest.raises(LabelOutOfRange):
        margin_loss(np.array([0.1, 0.2]), -1)


def test_reconstruction_loss_examples():
    x = np.random.default_rng(1).uniform(size=(2, 1, 3, 3))
    assert float(reconstruction_loss(x, x).data) == 0.0
    assert float(reconstruction_loss(np.full((4, 4), 0.5), np.zeros((4, 4))).data) == 0.25
    with pytest.raises(ShapeMismatch):
        reconstruction_loss(np.zeros(3), np.zeros(4))


def test_total_loss_assembles_parts():
    m = micro()
    ds = micro_data(4)
    loss, margin, mse, scores = total_loss(m, ds.images, ds.labels)
    assert float(loss.data) == pytest.approx(float(margin.data) + 0.0005 * float(mse.data), abs=1e-15)
    assert float(margin.data) == pytest.approx(float(margin_loss(scores, ds.labels).data), abs=1e-15)


# -- Adam ----------------------------------------------------------------------------------

def adam_oracle(w, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_adam_zero_gradient():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    st = OptimState()
    adam_step(p, {"w": np.zeros(2)}, st)
    assert p["w"].data.tolist() == [1.0, -2.0]
    assert st.step == 1


def test_adam_quadratic_descends_like_oracle():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    st = OptimState()
    seen, grads = [1.0], []
    for _ in range(100):
        g = 2 * p["w"].data.copy()
        grads.append(float(g[0]))
        adam_step(p, {"w": g}, st)
        seen.append(float(p["w"].data[0]))
    assert all(b < a for a, b in zip(seen, seen[1:]))
    assert seen[-1] == pytest.approx(adam_oracle(1.0, grads), abs=1e-14)


def test_adam_sign_symmetry():
    for g in [0.3, 5.0, 1e-6]:
        a = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        b = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        adam_step(a, {"w": np.array([g])}, OptimState())
        adam_step(b, {"w": np.array([-g])}, OptimState())
        assert a["w"].data[0] == -b["w"].data[0] != 0.0


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(ShapeMismatch):
        adam_step(p, {"w": np.zeros(3)}, OptimState())


def test_lr_schedule():
    st = OptimState()
    for e in range(6):
        assert st.lr_at(e, 1e-3) == pytest.approx(1e-3 * 0.9 ** e, rel=1e-15)


# -- loops -------------------------------------------------------------------------------------

def test_zero_epochs_returns_initial_model():
    m = micro()
    fp = m.fingerprint()
    res = train(m, micro_data(), epochs=0)
    assert res.metrics == [] and res.model.fingerprint() == fp
    assert metrics_csv(res.metrics) == "epoch,lr,train_loss,train_acc,val_acc\n"


def test_lr_recorded_per_epoch_and_csv():
    res = train(micro(), micro_data(6), epochs=3, batch_size=3, val=micro_data(4, seed=1))
    assert [r["lr"] for r in res.metrics] == pytest.approx([1e-3, 9e-4, 8.1e-4], rel=1e-12)
    lines = res.metrics_csv().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_acc,val_acc" and len(lines) == 4
    assert lines[1].split(",")[0] == "0"


def test_evaluate_confusion_and_order():
    m = micro()
    ds = micro_data(12)
    r = evaluate(m, ds)
    assert r.confusion.sum() == 12
    assert r.confusion.sum(axis=1).tolist() == np.bincount(ds.labels, minlength=2).tolist()
    perm = np.random.default_rng(0).permutation(12)
    assert evaluate(m, ds.subset(perm)).accuracy == r.accuracy


def test_small_step_decreases_batch_loss():
    m = micro(seed=2)
    ds = micro_data(8)
    loss0 = float(total_loss(m, ds.images, ds.labels)[0].data)
    m.zero_grad()
    T.backward(total_loss(m, ds.images, ds.labels)[0])
    adam_step(m.params, {n: p.grad for n, p in m.params.items()}, OptimState(lr=1e-5))
    assert float(total_loss(m, ds.images, ds.labels)[0].data) < loss0


def test_training_is_reproducible():
    ds = micro_data(8)
    a = train(micro(), ds, epochs=2, seed=3, batch_size=4)
    b = train(micro(), ds, epochs=2, seed=3, batch_size=4)
    assert a.model.fingerprint() == b.model.fingerprint()
    assert [r["train_loss"] for r in a.metrics] == [r["train_loss"] for r in b.metrics]


def test_callback_can_stop():
    res = train(micro(), micro_data(4), epochs=5, callback=lambda row: row["epoch"] == 1)
    assert len(res.metrics) == 2


def test_overfits_ten_samples():
    ds = synthetic_shapes(10, classes=("bar", "L"), size=9, seed=4)
    m = SOVNet(micro_config(image_size=9, stem_channels=4, primary_types=2, pose_dim=4, class_dim=4),
               seed=0, dtype=np.float64)
    train(m, ds, epochs=40, seed=0, batch_size=10, lr0=1e-2)
    assert evaluate(m, ds).accuracy == 1.0


def test_loop_errors():
    from sovnet.data import DataEmpty

    with pytest.raises(DataEmpty):
        train(micro(), micro_data(0), epochs=1)
    with pytest.raises(DataEmpty):
        evaluate(micro(), micro_data(0))
    with pytest.raises(ValueError):
        train(micro(), Dataset(np.zeros((2, 1, 5, 5)), [0, 2], classes=3), epochs=1)


def test_micro_gradcheck():
    ds = micro_data(2)
    rep = gradcheck(micro(seed=1), ds.images, ds.labels)
    assert rep.passed, rep.lines()
    assert rep.checked == micro().parameter_count()
