import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftadapt.autodiff import (
    Parameter,
    Tensor,
    constant,
    cosine_similarity_matrix,
    detach,
    finite_difference_check,
    matmul,
    scaled_softmax,
    tsum,
)


def test_cosine_identical_unit_vectors():
    a = constant([[1.0, 0.0]])
    out = cosine_similarity_matrix(a, constant([[1.0, 0.0]]))
    assert out.data[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_cosine_orthogonal():
    out = cosine_similarity_matrix(constant([[1.0, 0.0]]), constant([[0.0, 1.0]]))
    assert out.data[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_cosine_hand_value():
    # dot = 3*4 + 4*3 = 24, norms are 5 and 5
    out = cosine_similarity_matrix(constant([[3.0, 4.0]]), constant([[4.0, 3.0]]))
    assert out.data[0, 0] == pytest.approx(24.0 / 25.0, abs=1e-15)


def test_cosine_zero_row_errors():
    with pytest.raises(ValueError, match="row 1"):
        cosine_similarity_matrix(constant([[1.0, 0.0], [0.0, 0.0]]), constant([[1.0, 1.0]]))


def test_cosine_entries_bounded(any_backend):
    rng = np.random.default_rng(5)
    a = constant(rng.normal(size=(6, 9)))
    b = constant(rng.normal(size=(4, 9)))
    out = cosine_similarity_matrix(a, b).data
    assert out.max() <= 1.0 + 1e-12
    assert out.min() >= -1.0 - 1e-12


def test_softmax_symmetry():
    out = scaled_softmax(constant([[2.5, 2.5, 2.5]]), scale=7.0)
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_zero_scale_uniform():
    out = scaled_softmax(constant([[3.0, -1.0, 0.5, 9.0]]), scale=0.0)
    np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-15)


def test_softmax_sharp_closed_form():
    out = scaled_softmax(constant([[1.0, 0.0]]), scale=30.0)
    expect = np.array([1.0, math.exp(-30.0)]) / (1.0 + math.exp(-30.0))
    np.testing.assert_allclose(out.data[0], expect, rtol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(2, 9), st.floats(-16, 16), st.integers(0, 2**31 - 1))
def test_softmax_rows_are_distributions(b, c, scale, seed):
    # cosine-range logits: the operating regime where entries stay in (0, 1)
    logits = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(b, c))
    p = scaled_softmax(constant(logits), scale).data
    np.testing.assert_allclose(p.sum(axis=1), np.ones(b), atol=1e-12)
    assert (p > 0).all() and (p < 1).all()


def test_detach_value_equal_bitwise():
    x = Parameter(np.array([[1.5, -2.25], [0.1, 7.0]]))
    d = detach(x)
    assert (d.data == x.data).all()
    assert not d.requires_grad


def test_detach_blocks_gradient():
    # loss = <detach(x), x>: gradient must be x's values, not 2x
    x = Parameter(np.array([[1.0, 2.0]]))
    loss = tsum(detach(x) * x)
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.array([[1.0, 2.0]]))


def test_fully_detached_graph_zero_grads():
    x = Parameter(np.array([[3.0, -1.0]]))
    loss = tsum(detach(x) * detach(x))
    loss.backward()
    assert (x.grad == 0.0).all()


def test_backward_twice_accumulates():
    x = Parameter(np.array([[2.0]]))
    loss = tsum(x * x)
    loss.backward()
    loss.backward()
    assert x.grad[0, 0] == pytest.approx(8.0)  # 2 * (2x)


def test_matmul_gradients():
    a = Parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Parameter(np.array([[1.0, 0.0], [1.0, 1.0]]))
    loss = tsum(matmul(a, b))
    loss.backward()
    np.testing.assert_allclose(a.grad, np.array([[1.0, 2.0], [1.0, 2.0]]))
    np.testing.assert_allclose(b.grad, np.array([[4.0, 4.0], [6.0, 6.0]]))


def test_fd_quadratic():
    theta = Parameter(np.array([[1.0, -2.0, 3.0]]), name="theta")
    err = finite_difference_check(
        lambda ps: tsum(ps[0] * ps[0]) * 0.5, [theta], h=1e-5
    )
    assert err <= 1e-7


def test_fd_constant_graph():
    # loss built only from a detached input: no dependence on the probed
    # parameter, so analytic and central differences are both exactly zero
    theta = Parameter(np.array([[0.5, 1.5]]))
    frozen = detach(theta)
    err = finite_difference_check(
        lambda ps: tsum(frozen * frozen), [theta], h=1e-5
    )
    assert err == 0.0


def test_fd_rejects_bad_h():
    theta = Parameter(np.array([[1.0]]))
    with pytest.raises(ValueError):
        finite_difference_check(lambda ps: tsum(ps[0]), [theta], h=0.0)


def test_fd_reports_nonfinite_probe():
    theta = Parameter(np.array([[0.0]]), name="theta")

    def loss_fn(ps):
        val = ps[0].data[0, 0]
        if val > 0.5e-5:
            return constant(float("nan"))
        return tsum(ps[0])

    with pytest.raises(ArithmeticError, match=r"theta\[0,0\]"):
        finite_difference_check(loss_fn, [theta], h=1e-5)


def test_scalar_value_requires_1x1():
    with pytest.raises(ValueError):
        constant([[1.0, 2.0]]).value


def test_parameter_grad_zero_initialized():
    p = Parameter(np.ones((3, 2)))
    assert p.grad.shape == (3, 2)
    assert (p.grad == 0).all()
    p.grad += 1.0
    p.reset_grad()
    assert (p.grad == 0).all()


def test_broadcast_backward_shapes():
    a = Parameter(np.ones((3, 4)))
    col = Parameter(np.full((3, 1), 2.0))
    loss = tsum(a * col)
    loss.backward()
    assert a.grad.shape == (3, 4)
    assert col.grad.shape == (3, 1)
    np.testing.assert_allclose(col.grad, np.full((3, 1), 4.0))
