"""Input validation helpers shared by the estimators."""

import numpy as np


def as_float_matrix(x, name="x"):
    """Coerce to a 2-d float64 array, requiring finite entries."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and one column")
    if not np.all(np.isfinite(arr)):
        row = int(np.where(~np.isfinite(arr).all(axis=1))[0][0])
        raise ValueError(f"{name} contains a non-finite value at row {row}")
    return arr


def as_float_vector(x, name="y"):
    """Coerce to a 1-d float64 array, requiring finite entries."""
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size < 1:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        row = int(np.where(~np.isfinite(arr))[0][0])
        raise ValueError(f"{name} contains a non-finite value at row {row}")
    return arr


def as_binary_vector(x, name="t"):
    """Coerce to a 1-d integer array with entries in {0, 1}."""
    arr = np.asarray(x)
    flat = np.asarray(arr, dtype=float).ravel()
    bad = ~np.isin(flat, (0.0, 1.0))
    if np.any(bad):
        row = int(np.where(bad)[0][0])
        raise ValueError(f"{name} must be 0 or 1; found {flat[row]!r} at row {row}")
    return flat.astype(np.intp)


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_lengths(n, **named):
    for name, arr in named.items():
        if len(arr) != n:
            raise ValueError(f"{name} has length {len(arr)}, expected {n}")
