"""Forward contracts and finite-difference gradient checks for the NN ops."""

import math

import numpy as np
import pytest

from crackseg import (
    BCE_EPSILON,
    Tensor,
    backward,
    bce_loss,
    concat_channels,
    conv2d,
    maxpool2,
    relu,
    sigmoid,
    upconv2,
    upsample2,
)
from crackseg.tensor import mul, sum_all

from oracles import bce_loop, fd_check


def _t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    # Random weighting catches orientation bugs a plain sum() would cancel out.
    return sum_all(mul(out, Tensor(weights)))


# -- conv2d --------------------------------------------------------------------


def test_conv_scaling_identity():
    out = conv2d(
        _t(np.ones((1, 1, 3, 3))), _t([[[[2.0]]]]), _t(np.zeros(1)), padding="same"
    )
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_sum_kernel_valid():
    x = _t([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = conv2d(x, _t(np.ones((1, 1, 2, 2))), _t(np.zeros(1)), padding="valid")
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 10.0


def test_conv_same_preserves_spatial_dims(rng):
    x = _t(rng.standard_normal((2, 3, 9, 7)))
    w = _t(rng.standard_normal((4, 3, 3, 3)))
    out = conv2d(x, w, _t(np.zeros(4)))
    assert out.shape == (2, 4, 9, 7)


def test_conv_bias_broadcast():
    out = conv2d(
        _t(np.zeros((1, 2, 4, 4))), _t(np.zeros((3, 2, 3, 3))), _t([1.0, 2.0, 3.0])
    )
    for c, expected in enumerate([1.0, 2.0, 3.0]):
        np.testing.assert_array_equal(out.data[0, c], np.full((4, 4), expected))


def test_conv_channel_mismatch_error():
    with pytest.raises(ValueError, match="channels"):
        conv2d(_t(np.ones((1, 2, 4, 4))), _t(np.ones((1, 3, 3, 3))), _t(np.zeros(1)))


def test_conv_rejects_unknown_padding():
    with pytest.raises(ValueError, match="padding"):
        conv2d(_t(np.ones((1, 1, 4, 4))), _t(np.ones((1, 1, 3, 3))), _t(np.zeros(1)), padding="full")


def test_conv_gradients_match_finite_differences(rng):
    x = _t(rng.standard_normal((2, 3, 8, 8)))
    w = _t(rng.standard_normal((4, 3, 3, 3)) * 0.5)
    b = _t(rng.standard_normal(4) * 0.1)
    weights = rng.standard_normal((2, 4, 8, 8))
    fd_check(lambda: _weighted_sum(conv2d(x, w, b), weights), [x, w, b], rng, n_probes=120)


def test_conv_valid_gradients_match_finite_differences(rng):
    x = _t(rng.standard_normal((1, 2, 6, 6)))
    w = _t(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    b = _t(rng.standard_normal(3) * 0.1)
    weights = rng.standard_normal((1, 3, 4, 4))
    fd_check(
        lambda: _weighted_sum(conv2d(x, w, b, padding="valid"), weights), [x, w, b], rng, n_probes=80
    )


# -- maxpool2 ------------------------------------------------------------------


def test_maxpool_basic():
    out = maxpool2(_t([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.data[0, 0, 0, 0] == 4.0


def test_maxpool_odd_dims_error():
    with pytest.raises(ValueError, match="pad or crop"):
        maxpool2(_t(np.ones((1, 1, 3, 4))))


def test_maxpool_tie_routes_to_first_window_element():
    x = _t(np.ones((1, 1, 2, 2)))
    out = maxpool2(x)
    assert out.data[0, 0, 0, 0] == 1.0
    backward(sum_all(out))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_constant_input_constant_output():
    out = maxpool2(_t(np.full((1, 2, 4, 4), 7.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 7.0))


def test_maxpool_gradients_match_finite_differences(rng):
    # Resample until every window has a clear top-1 so probes avoid ties.
    while True:
        data = rng.standard_normal((1, 2, 8, 8))
        windows = data.reshape(1, 2, 4, 2, 4, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        top2 = np.sort(windows, axis=1)[:, -2:]
        if (top2[:, 1] - top2[:, 0]).min() > 1e-2:
            break
    x = Tensor(data, requires_grad=True)
    weights = np.random.default_rng(7).standard_normal((1, 2, 4, 4))
    fd_check(lambda: _weighted_sum(maxpool2(x), weights), [x], rng, n_probes=100)


# -- upsample2 / upconv2 ---------------------------------------------------------


def test_upsample_doubles_and_repeats():
    out = upsample2(_t([[[[1.0, 2.0], [3.0, 4.0]]]]))
    np.testing.assert_array_equal(
        out.data[0, 0],
        [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
    )


def test_upconv_hand_computed_2x2_cases():
    # Single pixel 5.0 upsamples to a 2x2 of fives; the 2x2 `same` conv pads
    # one zero row/column at bottom and right. Hand-worked results follow.
    x = _t([[[[5.0]]]])
    b = _t(np.zeros(1))

    out = upconv2(x, _t([[[[1.0, 0.0], [0.0, 0.0]]]]), b)
    np.testing.assert_array_equal(out.data[0, 0], [[5.0, 5.0], [5.0, 5.0]])

    out = upconv2(_t([[[[5.0]]]]), _t([[[[0.0, 1.0], [0.0, 0.0]]]]), b)
    np.testing.assert_array_equal(out.data[0, 0], [[5.0, 0.0], [5.0, 0.0]])

    out = upconv2(_t([[[[5.0]]]]), _t([[[[1.0, 1.0], [1.0, 1.0]]]]), b)
    np.testing.assert_array_equal(out.data[0, 0], [[20.0, 10.0], [10.0, 5.0]])


def test_upconv_zero_input_gives_bias():
    out = upconv2(_t(np.zeros((1, 2, 3, 3))), _t(np.ones((2, 2, 2, 2))), _t([1.5, -0.5]))
    assert out.shape == (1, 2, 6, 6)
    np.testing.assert_array_equal(out.data[0, 0], np.full((6, 6), 1.5))
    np.testing.assert_array_equal(out.data[0, 1], np.full((6, 6), -0.5))


def test_upconv_output_dims_exactly_doubled(rng):
    out = upconv2(
        _t(rng.standard_normal((2, 3, 5, 7))),
        _t(rng.standard_normal((4, 3, 2, 2))),
        _t(np.zeros(4)),
    )
    assert out.shape == (2, 4, 10, 14)


def test_upconv_gradients_match_finite_differences(rng):
    x = _t(rng.standard_normal((1, 2, 4, 4)))
    w = _t(rng.standard_normal((3, 2, 2, 2)) * 0.5)
    b = _t(rng.standard_normal(3) * 0.1)
    weights = rng.standard_normal((1, 3, 8, 8))
    fd_check(lambda: _weighted_sum(upconv2(x, w, b), weights), [x, w, b], rng, n_probes=100)


# -- concat_channels -------------------------------------------------------------


def test_concat_orders_channels():
    a = _t(np.ones((1, 1, 2, 2)))
    b = _t(np.full((1, 1, 2, 2), 2.0))
    out = concat_channels(a, b)
    assert out.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(out.data[0, 0], np.ones((2, 2)))
    np.testing.assert_array_equal(out.data[0, 1], np.full((2, 2), 2.0))


def test_concat_with_empty_channel_tensor_is_identity():
    x = _t(np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2))
    empty = _t(np.zeros((1, 0, 2, 2)))
    out = concat_channels(x, empty)
    np.testing.assert_array_equal(out.data, x.data)


def test_concat_gradient_splits():
    a = _t(np.ones((1, 2, 2, 2)))
    b = _t(np.ones((1, 3, 2, 2)))
    backward(sum_all(concat_channels(a, b)))
    np.testing.assert_array_equal(a.grad, np.ones((1, 2, 2, 2)))
    np.testing.assert_array_equal(b.grad, np.ones((1, 3, 2, 2)))


def test_concat_then_split_recovers_inputs(rng):
    a_data = rng.standard_normal((2, 3, 4, 4))
    b_data = rng.standard_normal((2, 2, 4, 4))
    out = concat_channels(_t(a_data), _t(b_data))
    np.testing.assert_array_equal(out.data[:, :3], a_data)
    np.testing.assert_array_equal(out.data[:, 3:], b_data)


def test_concat_spatial_mismatch_error():
    with pytest.raises(ValueError, match="spatial"):
        concat_channels(_t(np.ones((1, 1, 2, 2))), _t(np.ones((1, 1, 4, 4))))


# -- relu / sigmoid ---------------------------------------------------------------


def test_relu_values():
    out = relu(_t([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_relu_subgradient_at_zero_is_zero():
    x = _t([0.0])
    backward(sum_all(relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0])


def test_sigmoid_at_zero():
    assert sigmoid(_t([0.0])).data[0] == 0.5


def test_sigmoid_strictly_inside_unit_interval():
    out = sigmoid(Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4], dtype=np.float32)))
    assert np.all(out.data > 0.0)
    assert np.all(out.data < 1.0)


def test_relu_sigmoid_gradients_match_finite_differences(rng):
    data = rng.standard_normal(200)
    x = Tensor(data, requires_grad=True)
    weights = rng.standard_normal(200)
    skip = lambda pos, idx: abs(data[idx]) < 1e-3  # exclude the relu kink
    fd_check(lambda: _weighted_sum(relu(x), weights), [x], rng, n_probes=100, skip=skip)

    y = Tensor(rng.standard_normal(200), requires_grad=True)
    fd_check(lambda: _weighted_sum(sigmoid(y), weights), [y], rng, n_probes=100)


# -- bce_loss ---------------------------------------------------------------------


def test_bce_half_prediction_is_log_two(rng):
    pred = Tensor(np.full((1, 1, 4, 4), 0.5))
    target = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
    assert math.isclose(float(bce_loss(pred, target).data), math.log(2), rel_tol=1e-12)


def test_bce_perfect_prediction_is_at_clamp_floor():
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = float(bce_loss(Tensor(target.copy()), target).data)
    assert 0.0 <= loss <= -math.log(1.0 - BCE_EPSILON) * 1.000001


def test_bce_rejects_non_binary_targets():
    with pytest.raises(ValueError, match="0 or 1"):
        bce_loss(Tensor(np.full(3, 0.5)), np.array([0.0, 0.5, 1.0]))


def test_bce_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        bce_loss(Tensor(np.full(3, 0.5)), np.zeros(4))


def test_bce_is_nonnegative(rng):
    pred = Tensor(rng.uniform(0.01, 0.99, (5, 5)))
    target = (rng.random((5, 5)) > 0.7).astype(np.float64)
    assert float(bce_loss(pred, target).data) >= 0.0


def test_bce_matches_scalar_loop_oracle(rng):
    pred_data = rng.uniform(0.02, 0.98, (1, 1, 4, 4))
    target = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
    pred = Tensor(pred_data, requires_grad=True)
    loss = bce_loss(pred, target)
    backward(loss)
    oracle_value, oracle_grad = bce_loop(pred_data, target)
    assert abs(float(loss.data) - oracle_value) < 1e-10
    np.testing.assert_allclose(pred.grad, oracle_grad, atol=1e-10)


def test_bce_gradient_matches_finite_differences(rng):
    pred = Tensor(rng.uniform(0.05, 0.95, (2, 1, 4, 4)), requires_grad=True)
    target = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    fd_check(lambda: bce_loss(pred, target), [pred], rng, n_probes=32)
