"""Minimal dense numeric kernels shared by every other module.

Matrices are 2-D float32 numpy arrays in row-major (C) layout; score
vectors are 1-D float32 arrays with one entry per cached token position.
All inputs must be finite. Accumulation happens in at least 32-bit
precision; pooling accumulates in float64 and rounds back to float32.
"""

from __future__ import annotations

import numpy as np

Mat = np.ndarray
ScoreVec = np.ndarray


def as_mat(data, rows: int | None = None, cols: int | None = None) -> Mat:
    """Validate and coerce `data` into a finite float32 matrix."""
    m = np.asarray(data, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite values")
    return np.ascontiguousarray(m)


def as_scores(data) -> ScoreVec:
    """Validate and coerce `data` into a finite float32 score vector."""
    v = np.asarray(data, dtype=np.float32)
    if v.ndim != 1:
        raise ValueError(f"score vector must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("score vector contains non-finite values")
    return np.ascontiguousarray(v)


def matmul(a: Mat, b: Mat) -> Mat:
    """Conventional matrix product with shape and finiteness checks."""
    a = as_mat(a)
    b = as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.ascontiguousarray(a @ b)


def softmax_rows(m: Mat) -> Mat:
    """Row-wise softmax with max-subtraction for numerical stability."""
    m = as_mat(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted, dtype=np.float32)
    return e / e.sum(axis=1, keepdims=True)


def top_k_indices(scores: ScoreVec, k: int) -> np.ndarray:
    """Indices of the min(k, N) largest scores, ascending index order.

    Ties break toward the lower index. Selections are sets; callers only
    need membership and original ordering, so ascending output keeps
    intersections and cache slicing trivial.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    scores = as_scores(scores)
    n = scores.shape[0]
    k = min(k, n)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    # Stable sort on negated scores: equal scores keep ascending index order.
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def pool_avg_1d(scores: ScoreVec, kernel: int) -> ScoreVec:
    """Sliding-window mean with windows shrinking at the edges.

    Element i averages scores over [i - kernel//2, i + kernel//2] clipped
    to the valid range; kernel=1 is the identity. Kernel must be odd.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    scores = as_scores(scores)
    n = scores.shape[0]
    if kernel == 1 or n == 0:
        return scores.copy()
    half = kernel // 2
    csum = np.concatenate([[0.0], np.cumsum(scores, dtype=np.float64)])
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half, n - 1) + 1
    return ((csum[hi] - csum[lo]) / (hi - lo)).astype(np.float32)
