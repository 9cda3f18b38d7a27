"""Input validation helpers shared across the package.

All checks raise ValueError with the offending name and shape/value so call
sites stay terse.  Arguments follow the sklearn convention: the value under
validation comes first, its display name second.
"""

from __future__ import annotations

import numpy as np


def as_float_matrix(m, name: str) -> np.ndarray:
    """Coerce to a 2-D float64 array with all-finite entries."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_float_vector(v, name: str, length: int | None = None) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).ravel()
    if length is not None and arr.size != length:
        raise ValueError(f"{name} must have length {length}, got {arr.size}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_finite(arr, name: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be a positive finite number, got {value}")
    return value


def check_unit_rows(m: np.ndarray, name: str, tol: float = 1e-9) -> None:
    norms = np.linalg.norm(m, axis=1)
    bad = np.nonzero(np.abs(norms - 1.0) > tol)[0]
    if bad.size:
        raise ValueError(
            f"{name} rows must be unit-norm within {tol}; row {bad[0]} has norm {norms[bad[0]]!r}"
        )


def check_row_stochastic(m: np.ndarray, name: str, tol: float = 1e-9) -> None:
    if (m < -tol).any():
        raise ValueError(f"{name} has negative entries")
    sums = m.sum(axis=1)
    bad = np.nonzero(np.abs(sums - 1.0) > max(tol, 1e-9))[0]
    if bad.size:
        raise ValueError(f"{name} rows must sum to 1; row {bad[0]} sums to {sums[bad[0]]!r}")


def check_image(image, name: str, side: int) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.size != side * side:
        raise ValueError(f"{name} must have {side * side} pixels, got {arr.size}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite pixels")
    return arr.reshape(side, side)
