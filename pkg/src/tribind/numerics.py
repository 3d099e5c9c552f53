"""Dense matrix primitives and numerical-verification utilities.

Everything operates on plain 2-D float64 numpy arrays (row-major). These
helpers are pure functions; they validate their inputs and promise finite
outputs, which lets the loss and model layers skip defensive checks.
"""

from collections.abc import Callable

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError, ZeroRowError

ZERO_ROW_TOL = 1e-12


def as_matrix(m) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting NaN/Inf."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatchError(f"expected 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("matrix contains NaN or Inf")
    return a


def l2_normalize_rows(m) -> np.ndarray:
    """Scale each row to unit Euclidean norm, preserving direction."""
    a = as_matrix(m)
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms < ZERO_ROW_TOL):
        bad = int(np.argmin(norms))
        raise ZeroRowError(f"row {bad} has norm {norms[bad]:.3e} < {ZERO_ROW_TOL}")
    return a / norms[:, None]


def similarity_matrix(a, b) -> np.ndarray:
    """Pairwise dot products: out[i, j] = a_i . b_j.

    For unit-norm rows this is the cosine similarity in [-1, 1].
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    return a @ b.T


def log_softmax_rows(logits) -> np.ndarray:
    """Row-wise log-softmax via max subtraction (safe for large logits)."""
    a = as_matrix(logits)
    shifted = a - a.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax; rows sum to 1."""
    return np.exp(log_softmax_rows(logits))


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], x, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector.

    The workhorse oracle for every analytic-gradient check in the test
    suite; eps = 1e-5 balances truncation against rounding at float64.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = eps
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * eps)
    return grad


def relative_error(actual, expected) -> float:
    """max |a - e| / max(1e-30, max |e|), for gradient comparisons."""
    actual = np.asarray(actual, dtype=np.float64).ravel()
    expected = np.asarray(expected, dtype=np.float64).ravel()
    scale = max(1e-30, float(np.max(np.abs(expected))))
    return float(np.max(np.abs(actual - expected))) / scale
