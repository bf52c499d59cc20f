"""Minimal dense float64 linear algebra used by the network code.

Tensors are plain C-contiguous float64 numpy arrays.  Everything here is a
pure function over immutable inputs; callers never mutate returned arrays.
Products go through numpy's matmul, which is deterministic for fixed inputs
on a given machine, so repeated runs are bit-identical.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array and require finite entries."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor entries must be finite")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m x k) and b (k x n)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return alpha * x + y elementwise."""
    if x.shape != y.shape:
        raise ShapeError(f"axpy shapes disagree: {x.shape} vs {y.shape}")
    return alpha * x + y
