import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_conv1d
from ecgdg.autodiff import (ParamSet, Tape, Tensor, adam_step, load_checkpoint, ops,
                            read_checkpoint, save_checkpoint)
from ecgdg.errors import (CheckpointMismatch, DetachedLoss, EmptyTarget, InvalidRate,
                          NoGradients, NotScalar, ShapeMismatch)
from ecgdg.gradcheck import check_gradients, op_checks

ADAM_GOLDEN = json.loads((Path(__file__).parent / "golden" / "adam.json").read_text())


# ------------------------------------------------------------------ conv1d

def test_conv_output_length():
    y = ops.conv1d(Tensor(np.zeros((1, 2, 5000))), Tensor(np.zeros((3, 2, 7))), stride=2, padding=3)
    assert y.shape == (1, 3, 2500)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 4, 9))
    w = np.eye(4)[:, :, None]
    assert np.array_equal(ops.conv1d(Tensor(x), Tensor(w)).data, x)


def test_conv_matches_naive_small_case():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 8)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    got = ops.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, naive_conv1d(x, w, b), rtol=0, atol=1e-12)


def test_conv_matches_naive_100_random_shapes():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n, c_in, c_out = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
        k = int(rng.integers(1, 6))
        stride, pad = int(rng.integers(1, 4)), int(rng.integers(0, k))
        length = int(rng.integers(k, 20))
        x, w = rng.normal(size=(n, c_in, length)), rng.normal(size=(c_out, c_in, k))
        b = rng.normal(size=c_out) if rng.uniform() < 0.5 else None
        got = ops.conv1d(Tensor(x), Tensor(w), None if b is None else Tensor(b), stride, pad).data
        worst = max(worst, np.max(np.abs(got - naive_conv1d(x, w, b, stride, pad))))
    assert worst <= 1e-12


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        ops.conv1d(Tensor(np.zeros((1, 3, 10))), Tensor(np.zeros((2, 4, 3))))


# ------------------------------------------------------------- batchnorm

def test_batchnorm_train_standardizes():
    rng = np.random.default_rng(3)
    x = rng.normal(3, 5, size=(8, 4, 50))
    rm, rv = np.zeros(4), np.ones(4)
    y = ops.batchnorm1d(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, True, eps=0).data
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=(0, 2)), 1, atol=1e-6)
    # running stats moved towards the batch statistics
    assert np.all(rm > 0) and np.all(rv > 1)


def test_batchnorm_fixed_point():
    x = np.random.default_rng(4).normal(size=(16, 3, 200))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    y = ops.batchnorm1d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                        np.zeros(3), np.ones(3), True).data
    np.testing.assert_allclose(y, x, atol=1e-4)


def test_batchnorm_eval_uses_running_stats():
    x = np.full((2, 2, 3), 5.0)
    y = ops.batchnorm1d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                        np.array([1.0, 5.0]), np.array([4.0, 1.0]), False, eps=0).data
    assert np.allclose(y[:, 0], 2.0) and np.allclose(y[:, 1], 0.0)


def test_relu_propagates_nan():
    y = ops.relu(Tensor(np.array([np.nan, -1.0, 2.0]))).data
    assert np.isnan(y[0]) and y[1] == 0 and y[2] == 2


# -------------------------------------------------------- pooling, dropout

def test_global_avg_pool_constant():
    x = np.full((2, 3, 17), 4.25)
    assert np.allclose(ops.global_avg_pool(Tensor(x)).data, 4.25)


def test_maxpool_shape_and_values():
    x = np.arange(10.0).reshape(1, 1, 10)
    y = ops.maxpool1d(Tensor(x), 3, 2, 1).data
    assert y.shape == (1, 1, 5)
    assert np.array_equal(y[0, 0], [1, 3, 5, 7, 9])


@pytest.mark.parametrize("training", [True, False])
def test_dropout_rate_zero_identity(training):
    x = np.random.default_rng(5).normal(size=(2, 6, 5))
    y = ops.spatial_dropout(Tensor(x), 0.0, training, np.random.default_rng(0)).data
    assert np.array_equal(y, x)


def test_dropout_eval_identity():
    x = np.random.default_rng(6).normal(size=(2, 6, 5))
    assert np.array_equal(ops.spatial_dropout(Tensor(x), 0.5, False, None).data, x)


def test_dropout_zeroes_whole_channels_and_rescales():
    fractions = []
    for seed in range(20):
        y = ops.spatial_dropout(Tensor(np.ones((1, 1000, 1))), 0.5, True,
                                np.random.default_rng(seed)).data[0, :, 0]
        assert set(np.unique(y)) <= {0.0, 2.0}
        fractions.append(np.mean(y == 0))
        assert abs(fractions[-1] - 0.5) <= 0.05
    x = np.random.default_rng(7).normal(size=(2, 8, 6))
    y = ops.spatial_dropout(Tensor(x), 0.25, True, np.random.default_rng(1)).data
    for n in range(2):
        for c in range(8):
            row = y[n, c]
            assert not row.any() or np.allclose(row, x[n, c] / 0.75)


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_invalid_rate(rate):
    with pytest.raises(InvalidRate):
        ops.spatial_dropout(Tensor(np.ones((1, 2, 3))), rate, True, np.random.default_rng(0))


# ------------------------------------------------------------------ losses

@pytest.mark.parametrize("c", [2, 5, 24])
def test_softmax_uniform_logits(c):
    t = np.zeros((3, c))
    t[:, 1] = 1
    assert ops.head_loss(Tensor(np.full((3, c), 0.7)), t, "softmax_ce").item() == \
        pytest.approx(math.log(c), rel=1e-12)


def test_sigmoid_zero_logits():
    t = np.random.default_rng(8).integers(0, 2, size=(4, 6)).astype(float)
    assert ops.head_loss(Tensor(np.zeros((4, 6))), t, "sigmoid_bce").item() == \
        pytest.approx(math.log(2), rel=1e-12)


def test_softmax_empty_target():
    with pytest.raises(EmptyTarget):
        ops.head_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)), "softmax_ce")


def test_loss_stable_for_extreme_logits():
    z = np.array([[1000.0, -1000.0]])
    assert math.isfinite(ops.head_loss(Tensor(z), np.array([[0.0, 1.0]]), "sigmoid_bce").item())
    assert math.isfinite(ops.head_loss(Tensor(z), np.array([[0.0, 1.0]]), "softmax_ce").item())


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    theta = Tensor(np.random.default_rng(9).normal(size=7), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(theta)
    tape.backward(loss)
    assert np.array_equal(theta.grad, np.ones(7))


def test_backward_quadratic():
    theta = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(theta * theta)
    tape.backward(loss)
    assert np.array_equal(theta.grad, [2.0, 4.0, 6.0])


def test_backward_reused_tensor_accumulates():
    a = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(a * a + a * 3.0)
    tape.backward(loss)
    assert a.grad[0] == pytest.approx(7.0)


def test_backward_requires_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = a * 2.0
    with pytest.raises(NotScalar):
        tape.backward(out)


def test_backward_detached_loss():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        loss = ops.sum(a)
    with pytest.raises(DetachedLoss):
        Tape().backward(loss)
    with pytest.raises(DetachedLoss):
        Tape().backward(ops.sum(a))


def test_unreached_params_get_zero_grad():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(a)
    tape.backward(loss, [a, b])
    assert np.array_equal(b.grad, np.zeros(3))


def test_no_tape_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        pass
    ops.sum(a * a)
    assert tape.nodes == []


# ---------------------------------------------------------- finite diffs

# the tighter per-op tolerances quoted for these ops
OP_TOLERANCE = {"batchnorm1d_train": 1e-5, "batchnorm1d_eval": 1e-5,
                "head_loss_softmax": 1e-6, "head_loss_sigmoid": 1e-6}


@pytest.mark.parametrize("name,fn,inputs", op_checks(0), ids=lambda v: v if isinstance(v, str) else "")
def test_op_gradients(name, fn, inputs):
    r = check_gradients(fn, inputs, name, seed=0)
    assert r.checked >= 20
    assert r.max_rel_error < OP_TOLERANCE.get(name, 1e-4)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), stride=st.integers(1, 3), pad=st.integers(0, 2),
       k=st.integers(1, 4))
def test_conv_gradients_random_shapes(seed, stride, pad, k):
    rng = np.random.default_rng(seed)
    inputs = {"x": rng.normal(size=(2, 3, 9)), "w": rng.normal(size=(2, 3, k)),
              "b": rng.normal(size=2)}
    r = check_gradients(lambda t: ops.conv1d(t["x"], t["w"], t["b"], stride, pad),
                        inputs, "conv-prop", seed)
    assert r.max_rel_error < 1e-5


# ------------------------------------------------------------------- adam

def _scalar_param(value):
    ps = ParamSet()
    ps.add("theta", np.array([value], dtype=np.float64))
    return ps


def test_adam_first_step_magnitude():
    ps = ParamSet()
    ps.add("w", np.zeros(5))
    ps["w"].grad = np.ones(5)
    adam_step(ps, 0.001)
    np.testing.assert_allclose(ps["w"].data, -0.001, rtol=1e-7)


def test_adam_zero_gradient_fixed_point():
    ps = ParamSet()
    ps.add("w", np.array([1.5, -2.0]))
    ps["w"].grad = np.zeros(2)
    adam_step(ps, 0.1)
    assert np.array_equal(ps["w"].data, [1.5, -2.0])


def test_adam_no_gradients():
    ps = _scalar_param(0.0)
    with pytest.raises(NoGradients):
        adam_step(ps, 0.1)


def test_adam_matches_golden_trajectory():
    ps = _scalar_param(ADAM_GOLDEN["theta0"])
    path = []
    for _ in range(100):
        ps.zero_grad()
        with Tape() as tape:
            d = ps["theta"] - ADAM_GOLDEN["target"]
            loss = ops.sum(d * d)
        tape.backward(loss, ps)
        adam_step(ps, ADAM_GOLDEN["lr"])
        path.append(float(ps["theta"].data[0]))
    np.testing.assert_allclose(path, ADAM_GOLDEN["trajectory"], rtol=0, atol=1e-12)
    assert abs(path[-1] - 3.0) < 0.1


# ------------------------------------------------------------- checkpoints

def _paramset(seed=0):
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    ps.add("a.weight", rng.normal(size=(3, 2, 5)).astype(np.float32))
    ps.add("a.bias", rng.normal(size=3).astype(np.float32))
    ps.add_buffer("a.running_mean", rng.normal(size=3).astype(np.float32))
    return ps


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ps = _paramset()
    path = save_checkpoint(ps, tmp_path / "w.ckpt")
    other = load_checkpoint(_paramset(1), path)
    for name, value in ps.state().items():
        assert other.state()[name].tobytes() == value.tobytes()
    assert path.read_bytes()[:4] == b"EDGW"


def test_checkpoint_mismatch(tmp_path):
    path = save_checkpoint(_paramset(), tmp_path / "w.ckpt")
    ps = ParamSet()
    ps.add("a.weight", np.zeros((3, 2, 4), dtype=np.float32))
    ps.add("a.bias", np.zeros(3, dtype=np.float32))
    ps.add_buffer("a.running_mean", np.zeros(3, dtype=np.float32))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(ps, path)
    missing = ParamSet()
    missing.add("a.weight", np.zeros((3, 2, 5), dtype=np.float32))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(missing, path)


def test_checkpoint_truncated(tmp_path):
    path = save_checkpoint(_paramset(), tmp_path / "w.ckpt")
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointMismatch):
        read_checkpoint(path)
