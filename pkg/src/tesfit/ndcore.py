"""Dense float64 matrix kernels and the finite-difference gradient oracle.

Matrices are plain numpy float64 2-D arrays (row-major).  All public
operations keep 64-bit precision; the 32-bit representation exists only
in the on-disk file formats.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateRowError, EvaluationError, ParameterError, ShapeError

ZERO_NORM_TOL = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ShapeError(f"{name} contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of logits/temperature, max-subtracted for stability."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    z = as_matrix(logits, "logits") / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise log-softmax, computed without forming the exponentials twice."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    z = as_matrix(logits, "logits") / temperature
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm; near-zero rows are an error."""
    m = as_matrix(m, "rows")
    norms = np.linalg.norm(m, axis=1)
    bad = np.nonzero(norms <= ZERO_NORM_TOL)[0]
    if bad.size:
        raise DegenerateRowError(f"row {int(bad[0])} has near-zero norm {norms[bad[0]]:.3e}")
    return m / norms[:, None]


def l2_normalize_cols(m: np.ndarray) -> np.ndarray:
    """Column variant of l2_normalize_rows (used for proxy matrices)."""
    return l2_normalize_rows(as_matrix(m, "columns").T).T


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar field over a flat vector."""
    if not h > 0:
        raise ParameterError(f"step h must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        fp = float(f(x + step))
        fm = float(f(x - step))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GradCheckReport:
    """Elementwise comparison of an analytic gradient against the oracle."""

    max_abs_error: float
    max_rel_error: float
    analytic_norm: float
    numeric_norm: float

    def ok(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error <= tol


def compare_gradients(analytic: np.ndarray, numeric: np.ndarray) -> GradCheckReport:
    """Build a GradCheckReport; rel error is |a-n| / max(1e-12, |a|+|n|)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    diff = np.abs(a - n)
    denom = np.maximum(1e-12, np.abs(a) + np.abs(n))
    return GradCheckReport(
        max_abs_error=float(diff.max(initial=0.0)),
        max_rel_error=float((diff / denom).max(initial=0.0)),
        analytic_norm=float(np.linalg.norm(a)),
        numeric_norm=float(np.linalg.norm(n)),
    )


def gradient_check(
    f: Callable[[np.ndarray], float],
    analytic: np.ndarray,
    x: np.ndarray,
    h: float = 1e-5,
) -> GradCheckReport:
    """Convenience wrapper: finite-difference f at x and compare."""
    return compare_gradients(analytic, finite_diff_gradient(f, x, h))
