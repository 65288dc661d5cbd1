import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tesfit.errors import DegenerateRowError, EvaluationError, ParameterError, ShapeError
from tesfit.ndcore import (
    compare_gradients,
    finite_diff_gradient,
    gradient_check,
    l2_normalize_rows,
    log_softmax_rows,
    matmul,
    softmax_rows,
)
from tesfit.rng import SplitMix64


def naive_matmul(a, b):
    """Triple-loop oracle."""
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), b), b)

    def test_basis_selection(self):
        out = matmul(np.array([[1.0, 0.0]]), np.array([[2.0], [5.0]]))
        np.testing.assert_array_equal(out, [[2.0]])

    def test_matches_triple_loop_oracle(self):
        rng = SplitMix64(3)
        a = rng.normals((3, 4))
        b = rng.normals((4, 2))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(ShapeError):
            matmul(np.array([[np.nan, 1.0]]), np.ones((2, 1)))


class TestSoftmaxRows:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]], atol=1e-15)

    def test_log_two_ratio(self):
        out = softmax_rows(np.array([[math.log(2.0), 0.0]]))
        np.testing.assert_allclose(out, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-15)

    def test_half_temperature(self):
        # scalar oracle: exp(2)/(exp(2)+1)
        expected = math.exp(2.0) / (math.exp(2.0) + 1.0)
        out = softmax_rows(np.array([[1.0, 0.0]]), temperature=0.5)
        np.testing.assert_allclose(out, [[expected, 1.0 - expected]], rtol=1e-12)
        assert abs(out[0, 0] - 0.880797) < 1e-6

    def test_rows_sum_to_one_extreme_entries(self):
        logits = np.array([[700.0, -700.0, 0.0], [650.0, 700.0, -650.0]])
        out = softmax_rows(logits)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(np.isfinite(out))

    @given(st.floats(-100, 100), st.floats(0.1, 10.0))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, shift, temperature):
        logits = np.array([[0.3, -1.2, 2.0], [5.0, 5.0, -3.0]])
        a = softmax_rows(logits, temperature)
        b = softmax_rows(logits + shift, temperature)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_bad_temperature(self):
        with pytest.raises(ParameterError):
            softmax_rows(np.zeros((1, 2)), temperature=0.0)

    def test_log_softmax_consistent(self):
        logits = SplitMix64(5).normals((4, 6))
        np.testing.assert_allclose(
            np.exp(log_softmax_rows(logits, 0.7)), softmax_rows(logits, 0.7), atol=1e-12
        )


class TestL2NormalizeRows:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize_rows(np.array([[3.0, 4.0]])), [[0.6, 0.8]], atol=1e-15)

    def test_idempotent(self):
        m = SplitMix64(9).normals((5, 3))
        once = l2_normalize_rows(m)
        np.testing.assert_allclose(l2_normalize_rows(once), once, atol=1e-12)

    def test_zero_row_rejected(self):
        with pytest.raises(DegenerateRowError, match="row 1"):
            l2_normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestFiniteDiff:
    def test_square(self):
        grad = finite_diff_gradient(lambda v: float(v[0] ** 2), np.array([3.0]))
        assert abs(grad[0] - 6.0) < 1e-8

    def test_constant(self):
        grad = finite_diff_gradient(lambda v: 1.25, np.arange(4.0))
        np.testing.assert_array_equal(grad, np.zeros(4))

    def test_sum_of_squares(self):
        x = SplitMix64(11).normals(6)
        grad = finite_diff_gradient(lambda v: float(v @ v), x)
        np.testing.assert_allclose(grad, 2.0 * x, atol=1e-7)

    def test_non_finite_evaluation(self):
        with pytest.raises(EvaluationError):
            finite_diff_gradient(lambda v: float("nan"), np.ones(2))

    def test_gradient_check_report(self):
        x = np.array([1.0, -2.0])
        report = gradient_check(lambda v: float(v @ v), 2.0 * x, x)
        assert report.max_rel_error < 1e-9
        assert report.ok()

    def test_rel_error_definition(self):
        report = compare_gradients(np.array([1.0, 0.0]), np.array([2.0, 0.0]))
        # |1-2| / (|1|+|2|) = 1/3; zero-zero entries contribute 0
        assert abs(report.max_rel_error - 1.0 / 3.0) < 1e-15
        assert report.max_rel_error >= 0
