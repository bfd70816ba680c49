import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedod import tensornn as tnn
from fedod.tensornn import Parameter

from oracles import finite_difference, naive_conv2d, rel_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- conv2d ---------------------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 5, 5))
    out = tnn.conv2d(x, Parameter("w", np.ones((1, 1, 1, 1))), Parameter("b", np.zeros(1)))
    np.testing.assert_array_equal(out, x)


def test_conv_zero_input_gives_bias():
    out = tnn.conv2d(np.zeros((2, 4, 4)), Parameter("w", np.ones((3, 2, 3, 3))), Parameter("b", [1.0, -2.0, 0.5]), padding=1)
    for k, b in enumerate([1.0, -2.0, 0.5]):
        assert np.all(out[k] == b)


def test_conv_matches_naive_loops(rng):
    x = rng.normal(size=(1, 4, 4))
    w = rng.normal(size=(1, 1, 2, 2))
    b = rng.normal(size=1)
    out, _ = tnn.conv2d_forward(x, w, b)
    np.testing.assert_allclose(out, naive_conv2d(x, w, b, 1, 0), atol=1e-12)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (4, 2, 8), (2, 2, 5)])
def test_conv_strided_padded_matches_naive(rng, stride, pad, k):
    x = rng.normal(size=(3, 16, 16))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out, _ = tnn.conv2d_forward(x, w, b, stride, pad)
    np.testing.assert_allclose(out, naive_conv2d(x, w, b, stride, pad), atol=1e-10)


def test_conv_batch_equals_per_image(rng):
    x = rng.normal(size=(3, 2, 8, 8))
    w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    batched, _ = tnn.conv2d_forward(x, w, b, 2, 1)
    for i in range(3):
        np.testing.assert_allclose(batched[i], tnn.conv2d_forward(x[i], w, b, 2, 1)[0], atol=1e-12)


def test_conv_shape_errors(rng):
    with pytest.raises(tnn.ShapeError):
        tnn.conv2d_forward(rng.normal(size=(2, 4, 4)), rng.normal(size=(1, 3, 1, 1)), np.zeros(1))
    with pytest.raises(tnn.ShapeError):
        tnn.conv2d_forward(rng.normal(size=(4, 4)), rng.normal(size=(1, 1, 1, 1)), np.zeros(1))


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (4, 2)])
def test_conv_gradients(rng, stride, pad):
    x = rng.normal(size=(2, 2, 8, 8))
    w = rng.normal(size=(3, 2, 4, 4))
    b = rng.normal(size=3)
    up = rng.normal(size=tnn.conv2d_forward(x, w, b, stride, pad)[0].shape)
    f = lambda: float((tnn.conv2d_forward(x, w, b, stride, pad)[0] * up).sum())  # noqa: E731
    _, cache = tnn.conv2d_forward(x, w, b, stride, pad)
    dx, dw, db = tnn.conv2d_backward(up, cache)
    assert rel_error(dx, finite_difference(f, x)) < 1e-4
    assert rel_error(dw, finite_difference(f, w)) < 1e-4
    assert rel_error(db, finite_difference(f, b)) < 1e-4


# -- relu --------------------------------------------------------------------------


def test_relu_cases(rng):
    assert np.all(tnn.relu(-np.abs(rng.normal(size=(2, 3, 3))) - 0.1) == 0)
    pos = np.abs(rng.normal(size=(2, 3, 3))) + 0.1
    np.testing.assert_array_equal(tnn.relu(pos), pos)
    mixed = rng.normal(size=(4, 4))
    np.testing.assert_array_equal(tnn.relu(mixed), [[max(0.0, v) for v in row] for row in mixed])


def test_relu_gradient(rng):
    x = rng.normal(size=(2, 3, 4))
    x[np.abs(x) < 1e-2] = 0.5  # keep away from the kink
    up = rng.normal(size=x.shape)
    out, mask = tnn.relu_forward(x)
    f = lambda: float((tnn.relu_forward(x)[0] * up).sum())  # noqa: E731
    assert rel_error(tnn.relu_backward(up, mask), finite_difference(f, x)) < 1e-4


# -- spatial softmax -----------------------------------------------------------------


def test_softmax_constant_channel():
    out = tnn.spatial_softmax(np.full((1, 2, 2), 3.7), 4.0)
    np.testing.assert_allclose(out, 0.25, atol=1e-15)


def test_softmax_two_cell_case():
    out = tnn.spatial_softmax(np.array([[[0.0, math.log(3)]]]), 1.0)
    np.testing.assert_allclose(out.ravel(), [0.25, 0.75], atol=1e-15)


def test_softmax_high_temperature_uniform(rng):
    out = tnn.spatial_softmax(rng.normal(scale=5, size=(3, 4, 4)), 1e6)
    np.testing.assert_allclose(out, 1 / 16, atol=1e-3)


def test_softmax_bad_temperature():
    with pytest.raises(ValueError):
        tnn.spatial_softmax(np.zeros((1, 2, 2)), 0.0)


def test_softmax_gradient(rng):
    x = rng.normal(size=(2, 3, 3, 3))
    up = rng.normal(size=x.shape)
    f = lambda: float((tnn.spatial_softmax(x, 2.0) * up).sum())  # noqa: E731
    _, cache = tnn.spatial_softmax_forward(x, 2.0)
    assert rel_error(tnn.spatial_softmax_backward(up, cache), finite_difference(f, x)) < 1e-4


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)),
               elements=st.floats(-20, 20)),
    st.floats(0.1, 10),
)
def test_softmax_positive_and_normalized(x, temp):
    # logit spread / T stays below ~400 so no probability underflows
    out = tnn.spatial_softmax(x, temp)
    assert np.all(out > 0)
    np.testing.assert_allclose(out.reshape(out.shape[0], -1).sum(axis=1), 1.0, atol=1e-9)


# -- channel-wise KL -----------------------------------------------------------------


def test_kl_identical_zero(rng):
    x = rng.normal(size=(4, 3, 3))
    assert tnn.kl_channelwise(x, x, 4.0) == 0.0


def test_kl_scalar_case():
    # p = [0.5, 0.5], q = [0.25, 0.75]: 0.5 log 2 + 0.5 log(2/3)
    val = tnn.kl_channelwise(np.zeros((1, 1, 2)), np.array([[[0.0, math.log(3)]]]), 1.0)
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert val == pytest.approx(expected, abs=1e-12)
    assert val == pytest.approx(0.14384, abs=1e-5)


def test_kl_student_leads():
    # swapping roles changes the value: the student's map weights the log ratio
    s, t = np.zeros((1, 1, 2)), np.array([[[0.0, math.log(3)]]])
    assert tnn.kl_channelwise(t, s, 1.0) == pytest.approx(0.25 * math.log(0.5) + 0.75 * math.log(1.5), abs=1e-12)


def test_kl_shift_invariant(rng):
    s, t = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    shift = rng.normal(size=(3, 1, 1))
    assert tnn.kl_channelwise(s + shift, t - shift, 4.0) == pytest.approx(tnn.kl_channelwise(s, t, 4.0), abs=1e-12)


def test_kl_temperature_scaling():
    # T^2 / K prefactor: K=2 identical channels at T=2 equals 4x the per-channel KL at the scaled logits
    s = np.zeros((2, 1, 2))
    t = np.tile(np.array([[[0.0, 2 * math.log(3)]]]), (2, 1, 1))
    expected = 4.0 * (0.5 * math.log(2) + 0.5 * math.log(2 / 3))
    assert tnn.kl_channelwise(s, t, 2.0) == pytest.approx(expected, abs=1e-12)


def test_kl_shape_mismatch():
    with pytest.raises(tnn.ShapeError):
        tnn.kl_channelwise(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_kl_gradient(rng):
    s = rng.normal(size=(2, 3, 3, 3))
    t = rng.normal(size=(2, 3, 3, 3))
    f = lambda: tnn.kl_channelwise(s, t, 3.0)  # noqa: E731
    _, cache = tnn.kl_channelwise_forward(s, t, 3.0)
    assert rel_error(tnn.kl_channelwise_backward(cache), finite_difference(f, s)) < 1e-4


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(np.float64, (2, 3, 3), elements=st.floats(-20, 20)),
    hnp.arrays(np.float64, (2, 3, 3), elements=st.floats(-20, 20)),
    st.floats(0.5, 8),
)
def test_kl_nonnegative(s, t, temp):
    val = tnn.kl_channelwise(s, t, temp)
    assert val >= -1e-12
    same = np.allclose(tnn.spatial_softmax(s, temp), tnn.spatial_softmax(t, temp), atol=1e-12, rtol=0)
    if not same:
        assert val > 0


# -- l2 ------------------------------------------------------------------------------


def test_l2_cases(rng):
    a = rng.normal(size=(3, 4))
    assert tnn.l2_loss(a, a) == 0.0
    assert tnn.l2_loss(a + 1, a) == pytest.approx(1.0, abs=1e-12)
    b = rng.normal(size=(3, 4))
    assert tnn.l2_loss(a, b) == pytest.approx(sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / 12, abs=1e-12)


def test_l2_gradient(rng):
    a, b = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 2))
    _, diff = tnn.l2_loss_forward(a, b)
    assert rel_error(tnn.l2_loss_backward(diff), finite_difference(lambda: tnn.l2_loss(a, b), a)) < 1e-4


def test_l2_shape_mismatch():
    with pytest.raises(tnn.ShapeError):
        tnn.l2_loss(np.zeros(3), np.zeros(4))


# -- sgd -----------------------------------------------------------------------------


def test_sgd_zero_grad_and_zero_lr(rng):
    v = rng.normal(size=(3,))
    p = Parameter("p", v.copy())
    tnn.sgd_step([p], 0.1)
    np.testing.assert_array_equal(p.value, v)
    p.grad = np.ones(3)
    tnn.sgd_step([p], 0.0)
    np.testing.assert_array_equal(p.value, v)


def test_sgd_scalar_update():
    p = Parameter("p", np.array(1.0), np.array(0.5))
    tnn.sgd_step([p], 0.01)
    assert float(p.value) == pytest.approx(0.995, abs=1e-15)
    assert float(p.grad) == 0.0


def test_sgd_missing_grad():
    p = Parameter("p", np.zeros(2))
    p.grad = None
    with pytest.raises(ValueError):
        tnn.sgd_step([p], 0.1)


# -- checkpoints ------------------------------------------------------------------------


def test_checkpoint_byte_identical_round_trip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(2, 3)), "b.bias": rng.normal(size=(4,)), "s": np.array(1.5)}
    tnn.save_tensors(tmp_path / "x.ckpt", tensors, {"note": "x"})
    loaded, desc = tnn.load_tensors(tmp_path / "x.ckpt")
    assert desc == {"note": "x"}
    assert list(loaded) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])
        assert loaded[k].shape == tensors[k].shape
    tnn.save_tensors(tmp_path / "y.ckpt", loaded, desc)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_checkpoint_corruption(tmp_path, rng):
    blob = tnn.encode_tensors({"a": rng.normal(size=10)})
    with pytest.raises(tnn.CheckpointError):
        tnn.decode_tensors(blob[:-5])
    flipped = bytearray(blob)
    flipped[40] ^= 0xFF
    with pytest.raises(tnn.CheckpointError):
        tnn.decode_tensors(bytes(flipped))
    with pytest.raises(tnn.CheckpointError):
        tnn.load_tensors(tmp_path / "missing.ckpt")


def test_ops_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w, b = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    a = tnn.conv2d_forward(x, w, b, 2, 1)[0]
    c = tnn.conv2d_forward(x, w, b, 2, 1)[0]
    assert a.tobytes() == c.tobytes()
    assert tnn.kl_channelwise(a, c[::-1], 4.0) == tnn.kl_channelwise(a, c[::-1], 4.0)
