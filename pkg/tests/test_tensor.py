import math
import zlib

import numpy as np
import pytest
from conftest import check_gradients

from microcaps import tensor as T


def naive_conv(x, k, stride=1, padding=0):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ci, i * stride + u, j * stride + v] * k[o, ci, u, v]
                    out[b, o, i, j] = acc
    return out


# -- conv2d ------------------------------------------------------------------


def test_conv_ones_sum_to_nine():
    out = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_zero_kernel_gives_zero(rng):
    out = T.conv2d(T.Tensor(rng.standard_normal((2, 3, 6, 5))), T.Tensor(np.zeros((4, 3, 3, 3))), padding=1)
    assert np.all(out.data == 0)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_nested_loops(rng, stride, padding):
    x = rng.uniform(-1, 1, (2, 3, 8, 8))
    k = rng.uniform(-1, 1, (4, 3, 3, 3))
    got = T.conv2d(T.Tensor(x), T.Tensor(k), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, naive_conv(x, k, stride, padding), rtol=0, atol=1e-12)


def test_conv_output_size_formula(rng):
    x = T.Tensor(rng.standard_normal((1, 2, 11, 7)))
    out = T.conv2d(x, T.Tensor(rng.standard_normal((5, 2, 3, 2))), stride=2, padding=1)
    assert out.shape == (1, 5, (11 + 2 - 3) // 2 + 1, (7 + 2 - 2) // 2 + 1)


def test_conv_shape_errors_name_axis(rng):
    x = T.Tensor(rng.standard_normal((1, 3, 4, 4)))
    with pytest.raises(T.ShapeError, match="channel"):
        T.conv2d(x, T.Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(T.ShapeError, match="height"):
        T.conv2d(x, T.Tensor(np.zeros((2, 3, 5, 3))))
    with pytest.raises(T.ShapeError, match="width"):
        T.conv2d(x, T.Tensor(np.zeros((2, 3, 3, 6))))
    with pytest.raises(T.ShapeError, match="stride"):
        T.conv2d(x, T.Tensor(np.zeros((2, 3, 3, 3))), stride=0)


def test_conv_nhwc_agrees_with_channel_first(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    a = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), padding=1).data
    c = T.conv2d_nhwc(T.Tensor(x.transpose(0, 2, 3, 1)), T.Tensor(k.transpose(2, 3, 1, 0)), T.Tensor(b),
                      padding=1).data
    np.testing.assert_allclose(a, c.transpose(0, 3, 1, 2), atol=1e-12)


# -- dense / matmul ----------------------------------------------------------


def test_dense_identity_and_bias(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(T.dense(T.Tensor(x), T.Tensor(np.eye(4)), T.Tensor(np.zeros(4))).data, x)
    b = np.array([1.0, -2.0])
    out = T.dense(T.Tensor(x), T.Tensor(np.zeros((4, 2))), T.Tensor(b)).data
    assert np.array_equal(out, np.tile(b, (3, 1)))


def test_dense_matches_dot_products(rng):
    x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    expected = np.array([[sum(x[i, k] * w[k, j] for k in range(4)) for j in range(2)] for i in range(3)])
    np.testing.assert_allclose(T.dense(T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(2))).data, expected, atol=1e-12)


def test_dense_mismatch():
    with pytest.raises(T.ShapeError):
        T.dense(T.Tensor(np.zeros((3, 4))), T.Tensor(np.zeros((5, 2))), T.Tensor(np.zeros(2)))
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.zeros((3, 4))), T.Tensor(np.zeros((3, 4))))


# -- loss --------------------------------------------------------------------


def test_uniform_logits_loss_is_log_k():
    loss = T.softmax_cross_entropy(T.Tensor(np.zeros((5, 13))), np.arange(5))
    assert loss.item() == pytest.approx(math.log(13), abs=1e-12)
    assert math.log(13) == pytest.approx(2.5649, abs=1e-4)


def test_saturated_logit_loss_near_zero():
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 3] = 1e4
    assert T.softmax_cross_entropy(T.Tensor(logits), [1, 3]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_gradient(rng):
    labels = rng.integers(0, 5, 6)
    logits = T.Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    T.backward(T.softmax_cross_entropy(logits, labels))
    num = T.numerical_gradient(lambda: T.softmax_cross_entropy(T.Tensor(logits.data), labels).item(), logits.data)
    assert T.relative_error(logits.grad, num) <= 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), [-1, 0])


# -- backward ----------------------------------------------------------------


def test_sum_gives_ones(rng):
    x = T.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    T.backward(T.reduce_sum(x))
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_square_gives_two_x(rng):
    x = T.Tensor(rng.standard_normal(5), requires_grad=True)
    T.backward(T.reduce_sum(x * x))
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)


def test_two_consumers_sum_contributions(rng):
    # y = sum(3x) + sum(x*x): dy/dx = 3 + 2x along both paths
    x = T.Tensor(rng.standard_normal(4), requires_grad=True)
    y = T.add(T.reduce_sum(x * 3.0), T.reduce_sum(T.hadamard_multiply(x, x)))
    T.backward(y)
    np.testing.assert_allclose(x.grad, 3 + 2 * x.data, atol=1e-14)


def test_repeated_backward_accumulates(rng):
    x = T.Tensor(rng.standard_normal(3), requires_grad=True)
    T.backward(T.reduce_sum(x))
    T.backward(T.reduce_sum(x))
    assert np.array_equal(x.grad, 2 * np.ones(3))
    T.zero_grad([x])
    assert x.grad is None


def test_tape_is_topological_and_visits_once(rng):
    x = T.Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    h = T.relu(x)
    y = T.reduce_sum(T.hadamard_multiply(h, h))
    tape = T.backward(y)
    outputs = [e.output for e in tape.entries]
    assert len({id(o) for o in outputs}) == len(outputs)
    position = {id(o): i for i, o in enumerate(outputs)}
    for i, e in enumerate(tape.entries):
        for inp in e.inputs:
            if id(inp) in position:
                assert position[id(inp)] < i


def test_backward_errors(rng):
    x = T.Tensor(rng.standard_normal(3), requires_grad=True)
    with pytest.raises(T.GraphError):
        T.backward(T.relu(x))
    with pytest.raises(T.GraphError):
        T.backward(T.reduce_sum(T.Tensor(np.ones(3))))


def test_no_grad_records_nothing(rng):
    x = T.Tensor(rng.standard_normal(3), requires_grad=True)
    with T.no_grad():
        y = T.reduce_sum(x * x)
    assert not y.requires_grad
    assert T.reduce_sum(x).requires_grad


def test_check_finite():
    T.Tensor(np.ones(2)).check_finite()
    with pytest.raises(FloatingPointError):
        T.Tensor(np.array([1.0, np.nan])).check_finite()


def test_forward_is_bitwise_repeatable(rng):
    x = T.Tensor(rng.standard_normal((2, 3, 6, 6)))
    k = T.Tensor(rng.standard_normal((4, 3, 3, 3)))
    a = T.max_pool2d(T.relu(T.conv2d(x, k, padding=1)))
    b = T.max_pool2d(T.relu(T.conv2d(x, k, padding=1)))
    assert np.array_equal(a.data, b.data)


# -- gradient checks for every differentiable op -----------------------------

GRAD_CASES = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "hadamard_multiply": (lambda a, b: T.hadamard_multiply(a, b), [(2, 3, 4), (3, 1)]),
    "relu": (lambda a: T.relu(a), [(4, 5)]),
    "sigmoid": (lambda a: T.sigmoid(a), [(4, 5)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "reduce_sum_all": (lambda a: T.reduce_sum(a), [(3, 4)]),
    "reduce_sum_axis": (lambda a: T.reduce_sum(a, axis=1), [(3, 4, 2)]),
    "reduce_sum_keepdims": (lambda a: T.reduce_sum(a, axis=(0, 2), keepdims=True), [(3, 4, 2)]),
    "vector_norm": (lambda a: T.vector_norm(a, axis=-1), [(3, 5)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "dense": (lambda x, w, b: T.dense(x, w, b), [(3, 4), (4, 2), (2,)]),
    "conv2d": (lambda x, k, b: T.conv2d(x, k, b, stride=1, padding=1), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
    "conv2d_strided": (lambda x, k: T.conv2d(x, k, stride=2, padding=0), [(1, 2, 7, 6), (3, 2, 3, 2)]),
    "conv2d_nhwc": (lambda x, k, b: T.conv2d_nhwc(x, k, b, padding=1), [(2, 5, 4, 3), (3, 3, 3, 2), (2,)]),
    "max_pool2d": (lambda a: T.max_pool2d(a, 2), [(2, 3, 6, 5)]),
    "max_pool2d_nhwc": (lambda a: T.max_pool2d_nhwc(a, 3), [(1, 7, 6, 2)]),
    "avg_pool2d": (lambda a: T.avg_pool2d(a, 2), [(2, 2, 5, 4)]),
    "softmax_cross_entropy": (lambda a: T.softmax_cross_entropy(a, [0, 2, 1]), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradient_matches_finite_differences(name):
    fn, shapes = GRAD_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [rng.standard_normal(s) for s in shapes]
    check_gradients(fn, *arrays, tol=1e-4)


# -- Adam --------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    state = T.AdamState.zeros_like([p])
    T.adam_step([p], [np.zeros(2)], state)
    assert np.array_equal(p, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_closed_form():
    g = np.array([0.5, -3.0, 1e-3])
    p = np.zeros(3)
    lr, eps = 1e-3, 1e-8
    T.adam_step([p], [g], T.AdamState.zeros_like([p]), lr=lr, eps=eps)
    # bias-corrected m = g and v = g^2 at t = 1
    np.testing.assert_allclose(p, -lr * g / (np.abs(g) + eps), rtol=1e-12)


def test_adam_scalar_trajectory():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    expected = []
    for t in range(1, 11):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        expected.append(x)
    p = np.array([1.0])
    state = T.AdamState.zeros_like([p])
    got = []
    for _ in range(10):
        T.adam_step([p], [2 * p.copy()], state, lr=lr)
        got.append(p[0])
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_adam_shape_mismatch():
    p = np.zeros(3)
    with pytest.raises(T.ShapeError):
        T.adam_step([p], [np.zeros(2)], T.AdamState.zeros_like([p]))
    with pytest.raises(T.ShapeError):
        T.adam_step([p], [np.zeros(3)], T.AdamState.zeros_like([np.zeros(4)]))
