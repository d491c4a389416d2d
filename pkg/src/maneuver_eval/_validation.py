"""Input validation helpers shared by the estimators and free functions."""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import NonFiniteCoordinateError, ShapeMismatchError, TooShortError


def check_xy(xy, *, min_length: int = 2, name: str = "trajectory") -> np.ndarray:
    """Coerce ``xy`` to a finite float64 array of shape (T, 2).

    Accepts anything :func:`numpy.asarray` understands (nested lists of
    pairs, tuples, arrays). The returned array is always a fresh copy.
    """
    arr = np.array(xy, dtype=np.float64, copy=True)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeMismatchError(f"{name} must have shape (T, 2), got {arr.shape}")
    if arr.shape[0] < min_length:
        raise TooShortError(f"{name} needs at least {min_length} waypoints, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteCoordinateError(f"{name} contains non-finite coordinates")
    return arr


def check_positive(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a finite positive number, got {value!r}")
    return float(value)


def check_non_negative(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite non-negative number, got {value!r}")
    return float(value)


def check_embedding_matrix(X, *, name: str = "X") -> np.ndarray:
    """Coerce embeddings to a finite 2-D float64 array (n_samples, n_features)."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ShapeMismatchError(f"{name} must be 2-D with at least one feature, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
