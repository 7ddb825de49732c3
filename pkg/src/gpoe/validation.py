"""Input validation helpers used at the public API boundaries."""

from __future__ import annotations

import numpy as np

from .exceptions import ContractError, NumericError, ShapeMismatchError


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, optionally enforcing rank."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ContractError(f"{name}: expected a {ndim}-d array, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)


def check_in_range(value: float, name: str, lo: float, hi: float) -> float:
    value = float(value)
    if not (lo <= value <= hi):
        raise ContractError(f"{name} must lie in [{lo}, {hi}], got {value}")
    return value


def check_positive(value, name: str, strict: bool = True):
    if strict and not value > 0:
        raise ContractError(f"{name} must be > 0, got {value}")
    if not strict and not value >= 0:
        raise ContractError(f"{name} must be >= 0, got {value}")
    return value
