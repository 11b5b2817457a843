import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedreg.nn.layers import (
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    maxpool2_backward,
    maxpool2_forward,
)
from oracles import fd_gradient, max_rel_err


def test_conv_identity_kernel_reproduces_input():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 3, 3))
    for o in range(3):
        w[o, o, 1, 1] = 1.0  # delta at the kernel center
    out, _ = conv2d_forward(x, w, np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_conv_shifted_kernel_reads_padded_neighbor():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 0] = 1.0  # top-left tap: out[i, j] = x[i-1, j-1], zero off the edge
    out, _ = conv2d_forward(x, w, np.zeros(1))
    expected = np.zeros((1, 1, 4, 4))
    expected[0, 0, 1:, 1:] = x[0, 0, :-1, :-1]
    np.testing.assert_array_equal(out, expected)


def test_conv_bias_is_per_channel():
    x = np.zeros((1, 1, 2, 2))
    out, _ = conv2d_forward(x, np.zeros((2, 1, 3, 3)), np.array([1.5, -2.0]))
    assert (out[0, 0] == 1.5).all() and (out[0, 1] == -2.0).all()


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((2, 3, 4, 4))  # random linear functional of the output

    def loss():
        out, _ = conv2d_forward(x, w, b)
        return float((out * r).sum())

    out, cache = conv2d_forward(x, w, b)
    dx, dw, db = conv2d_backward(r, cache)
    assert max_rel_err(fd_gradient(loss, x), dx) < 1e-6
    assert max_rel_err(fd_gradient(loss, w), dw) < 1e-6
    assert max_rel_err(fd_gradient(loss, b), db) < 1e-6


def test_maxpool_forward_hand_example():
    x = np.array([[[[1.0, 2.0, 0.0],
                    [3.0, 4.0, 9.0],
                    [5.0, 6.0, 7.0]]]])  # odd row/col must be cropped, 9 and 7 ignored
    out, _ = maxpool2_forward(x)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 4.0


def test_maxpool_backward_routes_to_argmax_and_cropped_gets_zero():
    x = np.array([[[[1.0, 2.0, 0.0],
                    [3.0, 4.0, 9.0],
                    [5.0, 6.0, 7.0]]]])
    _, cache = maxpool2_forward(x)
    dx = maxpool2_backward(np.ones((1, 1, 1, 1)), cache)
    expected = np.zeros((1, 1, 3, 3))
    expected[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(dx, expected)


def test_maxpool_tie_takes_first_position():
    x = np.full((1, 1, 2, 2), 7.0)
    out, cache = maxpool2_forward(x)
    assert out[0, 0, 0, 0] == 7.0
    dx = maxpool2_backward(np.ones((1, 1, 1, 1)), cache)
    assert dx[0, 0, 0, 0] == 1.0 and dx.sum() == 1.0


def test_maxpool_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    # distinct values keep the max away from ties, where FD is undefined
    x = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)
    r = rng.standard_normal((1, 1, 4, 4))

    def loss():
        out, _ = maxpool2_forward(x)
        return float((out * r).sum())

    _, cache = maxpool2_forward(x)
    dx = maxpool2_backward(r, cache)
    assert max_rel_err(fd_gradient(loss, x, eps=1e-3), dx) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(2, 7), st.integers(2, 7),
       st.integers(0, 2 ** 31 - 1))
def test_maxpool_output_is_window_max(b, c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((b, c, h, w))
    out, _ = maxpool2_forward(x)
    assert out.shape == (b, c, h // 2, w // 2)
    for i in range(h // 2):
        for j in range(w // 2):
            win = x[:, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
            np.testing.assert_array_equal(out[:, :, i, j], win.max(axis=(2, 3)))


def test_dense_forward_hand_example():
    x = np.array([[1.0, 2.0]])
    w = np.array([[3.0, 4.0], [5.0, 6.0], [0.0, -1.0]])
    out, _ = dense_forward(x, w, np.array([0.5, 0.0, 1.0]))
    np.testing.assert_allclose(out, [[11.5, 17.0, -1.0]])


def test_dense_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(3)
    r = rng.standard_normal((4, 3))

    def loss():
        out, _ = dense_forward(x, w, b)
        return float((out * r).sum())

    _, cache = dense_forward(x, w, b)
    dx, dw, db = dense_backward(r, cache, w)
    assert max_rel_err(fd_gradient(loss, x), dx) < 1e-6
    assert max_rel_err(fd_gradient(loss, w), dw) < 1e-6
    assert max_rel_err(fd_gradient(loss, b), db) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_conv_is_linear_in_input_at_zero_bias(seed):
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((1, 2, 4, 4))
    x2 = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3))
    b = np.zeros(2)
    lhs, _ = conv2d_forward(x1 + x2, w, b)
    r1, _ = conv2d_forward(x1, w, b)
    r2, _ = conv2d_forward(x2, w, b)
    np.testing.assert_allclose(lhs, r1 + r2, atol=1e-12)
