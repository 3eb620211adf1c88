"""Input validation helpers shared by the estimator-facing API."""

from __future__ import annotations

import numpy as np


def as_float_array(x, ndim: int, name: str) -> np.ndarray:
    """Coerce to a finite float64 array with the expected rank."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_windows(X, y=None):
    """Validate (n, lag, d) inputs and optional (n, regions) targets."""
    X = as_float_array(X, 3, "X")
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError(f"X must be nonempty with lag >= 1, got shape {X.shape}")
    if y is None:
        return X
    y = as_float_array(y, 2, "y")
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} samples but y has {y.shape[0]}")
    return X, y
