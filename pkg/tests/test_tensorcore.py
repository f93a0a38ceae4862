import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from c2a.tensorcore import (
    LinearLayer,
    NonFiniteError,
    Parameter,
    SgdState,
    ShapeError,
    finite_diff_check,
    leaky_relu_backward,
    leaky_relu_forward,
    linear_backward,
    linear_forward,
    sgd_step,
    softmax,
)


def naive_linear(W, b, x):
    out = np.zeros((x.shape[0], W.shape[0]))
    for n in range(x.shape[0]):
        for o in range(W.shape[0]):
            acc = b[o]
            for i in range(W.shape[1]):
                acc += W[o, i] * x[n, i]
            out[n, o] = acc
    return out


def make_layer(W, b):
    layer = LinearLayer(W.shape[1], W.shape[0])
    layer.load(W, b)
    return layer


def test_linear_identity():
    layer = make_layer(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(linear_forward(layer, np.array([[3.0, 4.0]])), [[3.0, 4.0]])


def test_linear_hand_sum():
    layer = make_layer(np.array([[1.0, 1.0]]), np.array([1.0]))
    np.testing.assert_array_equal(linear_forward(layer, np.array([[2.0, 3.0]])), [[6.0]])


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(3)
    W, b, x = rng.normal(size=(3, 5)), rng.normal(size=3), rng.normal(size=(2, 5))
    np.testing.assert_allclose(linear_forward(make_layer(W, b), x), naive_linear(W, b, x), rtol=1e-13)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1)
)
def test_linear_naive_property(n, i, o, seed):
    rng = np.random.default_rng(seed)
    W, b, x = rng.normal(size=(o, i)), rng.normal(size=o), rng.normal(size=(n, i))
    np.testing.assert_allclose(
        linear_forward(make_layer(W, b), x), naive_linear(W, b, x), rtol=1e-12, atol=1e-12
    )


def test_linear_shape_error_names_shapes():
    layer = LinearLayer(3, 2)
    with pytest.raises(ShapeError, match=r"\(4, 5\).*\(2, 3\)"):
        linear_forward(layer, np.zeros((4, 5)))
    with pytest.raises(ShapeError):
        linear_backward(layer, np.zeros((4, 3)), np.zeros((4, 3)))


def test_linear_backward_zero_grad_out():
    rng = np.random.default_rng(0)
    layer = LinearLayer(4, 3, rng)
    gin = linear_backward(layer, rng.normal(size=(2, 4)), np.zeros((2, 3)))
    assert not gin.any()
    assert not layer.grad_weight.any() and not layer.grad_bias.any()


def test_linear_backward_scalar_chain_rule():
    layer = make_layer(np.array([[1.5]]), np.array([0.0]))
    gin = linear_backward(layer, np.array([[2.0]]), np.array([[3.0]]))
    assert layer.grad_weight[0, 0] == 6.0
    assert layer.grad_bias[0] == 3.0
    assert gin[0, 0] == 3.0 * 1.5


def test_linear_backward_accumulates():
    layer = make_layer(np.array([[1.0]]), np.array([0.0]))
    linear_backward(layer, np.array([[2.0]]), np.array([[3.0]]))
    linear_backward(layer, np.array([[2.0]]), np.array([[3.0]]))
    assert layer.grad_weight[0, 0] == 12.0


@pytest.mark.parametrize("seed", range(20))
def test_linear_backward_finite_difference(seed):
    rng = np.random.default_rng(seed)
    layer = LinearLayer(5, 3, rng)
    layer.bias.value[:] = rng.normal(size=3)
    x = rng.normal(size=(4, 5))
    c = rng.normal(size=(4, 3))

    def loss():
        return float((c * np.tanh(linear_forward(layer, x))).sum())

    y = linear_forward(layer, x)
    g = c * (1 - np.tanh(y) ** 2)
    gx = linear_backward(layer, x, g)

    def loss_x():
        return float((c * np.tanh(linear_forward(layer, xx))).sum())

    xx = x.copy()
    err = finite_diff_check(
        loss, [layer.weight.value, layer.bias.value], [layer.grad_weight, layer.grad_bias], n_samples=None
    )
    err_x = finite_diff_check(loss_x, [xx], [gx], n_samples=None)
    assert err < 1e-6 and err_x < 1e-6


def test_leaky_relu_values():
    np.testing.assert_allclose(leaky_relu_forward(np.array([-1.0, 0.0, 2.0]), 0.2), [-0.2, 0.0, 2.0])
    x = np.array([0.1, 3.0, 7.5])
    np.testing.assert_array_equal(leaky_relu_forward(x, 0.2), x)


def test_leaky_relu_subgradient_at_zero_is_slope():
    g = leaky_relu_backward(np.array([0.0]), np.array([1.0]), 0.3)
    assert g[0] == 0.3


@pytest.mark.parametrize("seed", range(5))
def test_leaky_relu_backward_finite_difference(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=20)
    x = x[np.abs(x) > 1e-3]
    c = rng.normal(size=x.shape)
    g = leaky_relu_backward(x, c, 0.2)
    err = finite_diff_check(
        lambda: float((c * leaky_relu_forward(x, 0.2)).sum()), [x], [g], eps=1e-6, n_samples=None
    )
    assert err < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)
    p = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-300)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)),
    st.floats(-1e3, 1e3),
)
def test_softmax_simplex_and_shift(logits, c):
    p = softmax(logits)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(logits + c), p, atol=1e-12)


def test_sgd_step_basic():
    p = Parameter(np.array([1.0]))
    p.grad[:] = 1.0
    state = SgdState(base_lr=0.1, max_iter=10)
    sgd_step([p], state)
    assert p.value[0] == pytest.approx(0.9)
    assert state.iter == 1


def test_sgd_step_at_max_iter_is_identity():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad[:] = [5.0, 7.0]
    state = SgdState(base_lr=0.1, max_iter=10, iter=10)
    assert state.lr() == 0.0
    sgd_step([p], state)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_sgd_schedule_strictly_decreasing():
    state = SgdState(base_lr=2.5e-4, max_iter=100, power=0.9)
    lrs = [state.lr(i) for i in range(101)]
    expected = [2.5e-4 * (1 - i / 100) ** 0.9 for i in range(101)]
    np.testing.assert_allclose(lrs, expected, rtol=1e-15)
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) >= 0


def test_finite_diff_quadratic_is_tight():
    rng = np.random.default_rng(0)
    p = rng.normal(size=10)
    err = finite_diff_check(lambda: 0.5 * float(p @ p), [p], [p.copy()], eps=1e-5, n_samples=None)
    assert err < 1e-9


def test_finite_diff_detects_corrupted_gradient():
    rng = np.random.default_rng(1)
    p = rng.normal(size=10) + 0.5
    # |g - 2g| / |2g| = 0.5 with the analytic gradient in the denominator
    err = finite_diff_check(lambda: 0.5 * float(p @ p), [p], [2 * p], n_samples=None)
    assert err == pytest.approx(0.5, rel=1e-6)


def test_finite_diff_non_finite_loss():
    p = np.array([1.0])
    with pytest.raises(NonFiniteError):
        finite_diff_check(lambda: float("nan"), [p], [np.zeros(1)])
