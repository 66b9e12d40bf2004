import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phsa import numeric
from phsa.numeric import (
    EvaluationError,
    Precision,
    ShapeError,
    Tape,
    Tensor,
    grad_check,
    matmul,
    matrix,
    mul,
    prelu,
    softmax_rows,
    sum_all,
    swish,
)

# Frozen from a 30-digit mpmath evaluation of x / (1 + exp(-x)).
SWISH_AT_1 = 0.731058578630004879
SWISH_AT_MINUS_1 = -0.268941421369995121

finite = st.floats(min_value=-50, max_value=50, allow_nan=False)


def small_matrices(max_side=6):
    shape = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=finite))


class TestMatmul:
    def test_identity(self):
        out = matmul(matrix([[1, 2], [3, 4]]), matrix([[1, 0], [0, 1]]))
        np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])

    def test_outer_product(self):
        out = matmul(matrix([[1], [2]]), matrix([[3, 6]]))
        np.testing.assert_array_equal(out.value, [[3, 6], [6, 12]])

    def test_zero(self):
        np.testing.assert_array_equal(matmul(matrix([[0, 0]]), matrix([[5], [7]])).value, [[0]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_matrix_rejects_empty(self):
        with pytest.raises(ShapeError):
            matrix([[]])


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_array_equal(softmax_rows(matrix([[0, 0]])).value, [[0.5, 0.5]])

    def test_ln2_row(self):
        out = softmax_rows(matrix([[math.log(2), 0.0]])).value
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_mask_gives_exact_zeros(self):
        out = softmax_rows(matrix([[1.0, 2.0, 3.0]]), mask=[True, False, True]).value
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out.sum(), 1.0, atol=1e-15)

    def test_huge_scores_stay_finite(self):
        out = softmax_rows(matrix([[1e300, -1e300, 0.0]])).value
        assert np.isfinite(out).all()

    @given(small_matrices())
    def test_rows_sum_to_one(self, s):
        p = softmax_rows(Tensor(s)).value
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.isfinite(p).all() and (p >= 0).all()

    @given(small_matrices(), st.data())
    def test_row_shift_invariance(self, s, data):
        shift = data.draw(arrays(np.float64, (s.shape[0], 1), elements=finite))
        a = softmax_rows(Tensor(s)).value
        b = softmax_rows(Tensor(s + shift)).value
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestSwish:
    def test_reference_values(self):
        assert swish(0.0).item() == 0.0
        assert swish(1.0).item() == pytest.approx(SWISH_AT_1, abs=1e-15)
        assert swish(-1.0).item() == pytest.approx(SWISH_AT_MINUS_1, abs=1e-15)

    def test_limits(self):
        big = np.array([20.0, 40.0, 80.0])
        np.testing.assert_allclose(swish(big).value, big, rtol=1e-8)
        np.testing.assert_allclose(swish(-big).value, 0.0, atol=1e-6)

    def test_monotone_on_non_negative_grid(self):
        y = swish(np.linspace(0, 30, 3001)).value
        assert (np.diff(y) > 0).all()


class TestPrelu:
    @pytest.mark.parametrize("x, alpha, want", [(5, 0.3, 5), (-2, 0.5, -1), (-2, 1, -2)])
    def test_examples(self, x, alpha, want):
        assert prelu(float(x), float(alpha)).item() == want

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(allow_nan=False, allow_infinity=False)))
    def test_unit_slope_is_identity(self, x):
        np.testing.assert_array_equal(prelu(x, 1.0).value, x)

    def test_gradient_at_zero_uses_non_negative_branch(self):
        x = Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True)
        a = Tensor(np.array(0.25), requires_grad=True)
        with Tape() as tape:
            y = sum_all(prelu(x, a))
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, [1.0, 0.25, 1.0])
        assert a.grad == pytest.approx(-1.0)


class TestTape:
    def test_backward_replays_in_reverse(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = swish(matmul(x, x))
            z = sum_all(softmax_rows(y))
        visited = tape.backward(z)
        assert visited == [n.op for n in reversed(tape.nodes)]

    def test_fan_out_accumulates(self):
        x = Tensor(np.array([[3.0]]), requires_grad=True)
        with Tape() as tape:
            y = sum_all(mul(x, x) + x)
        tape.backward(y)
        assert x.grad[0, 0] == pytest.approx(7.0)

    def test_nothing_recorded_without_tape(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        assert not matmul(x, x).requires_grad

    def test_broadcast_gradient_is_reduced(self):
        x = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones((1, 4)), requires_grad=True)
        with Tape() as tape:
            y = sum_all(x + b)
        tape.backward(y)
        assert b.grad.shape == (1, 4)
        np.testing.assert_array_equal(b.grad, [[3.0] * 4])


class TestGradCheck:
    def test_square(self):
        w = Tensor(np.array([3.0]), requires_grad=True)
        assert grad_check(lambda: sum_all(mul(w, w)), [w]) < 1e-9

    def test_softmax_of_product(self):
        rng = np.random.default_rng(0)
        X = Tensor(rng.normal(size=(4, 3)))
        W = Tensor(rng.normal(size=(3, 5)))
        weights = Tensor(rng.normal(size=(4, 5)))
        assert grad_check(lambda: sum_all(softmax_rows(matmul(X, W))), [W]) < 1e-6
        assert grad_check(lambda: sum_all(mul(softmax_rows(matmul(X, W)), weights)), [X, W]) < 1e-6

    def test_prelu_on_negative_side(self):
        x = Tensor(np.array([-0.7, -2.0, -0.3]))
        a = Tensor(np.array(0.4))
        assert grad_check(lambda: sum_all(mul(prelu(x, a), x)), [x, a]) < 1e-6

    def test_rejects_train_grade(self):
        w = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="check-grade"):
            grad_check(lambda: sum_all(w), [w])

    def test_rejects_epsilon_outside_range(self):
        w = Tensor(np.ones(2))
        with pytest.raises(ValueError, match="epsilon"):
            grad_check(lambda: sum_all(w), [w], epsilon=1e-2)

    def test_non_finite_function(self):
        w = Tensor(np.array([1.0]))
        with pytest.raises(EvaluationError):
            grad_check(lambda: sum_all(mul(w, np.inf)), [w])

    def test_restores_parameter_state(self):
        w = Tensor(np.array([1.0, 2.0]))
        grad_check(lambda: sum_all(mul(w, w)), [w])
        assert not w.requires_grad and w.grad is None
        np.testing.assert_array_equal(w.value, [1.0, 2.0])


def test_primitive_suite_passes():
    from phsa.verify import primitive_grad_error

    assert primitive_grad_error() < 1e-6


def test_precision_dtypes():
    assert Precision.TRAIN.dtype == np.float32
    assert Precision.CHECK.dtype == np.float64
    assert Precision.of(np.float64) is Precision.CHECK


def test_train_grade_stays_float32():
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    w = Tensor(np.ones((3, 3), dtype=np.float32))
    out = softmax_rows(swish(matmul(x, w)) / 3.0 + 1.0)
    assert out.dtype == np.float32


@settings(max_examples=30)
@given(small_matrices(), st.floats(0.01, 3.0))
def test_public_ops_keep_finite_values(s, alpha):
    t = Tensor(s)
    for out in (swish(t), prelu(t, alpha), softmax_rows(t), numeric.transpose(t)):
        assert np.isfinite(out.value).all()
