"""Input validation helpers and the package exception hierarchy.

Every public operation funnels its argument checking through these helpers so
that error categories stay consistent across the library and the CLI exit-code
mapping (usage=1, data=2, numerical=3) has one source of truth.
"""

from __future__ import annotations

import numpy as np


class VidrepError(Exception):
    """Base class for all errors raised by this package."""


class DataError(VidrepError):
    """Malformed, inconsistent, or unresolvable input data (CLI exit 2)."""


class MalformedInputError(DataError):
    """An input violates a structural precondition (empty grid, bad shape)."""


class DimensionMismatchError(DataError):
    """Two inputs that must agree in dimension do not."""


class InsufficientDataError(DataError):
    """Not enough samples to carry out a fitting procedure."""


class NumericalError(VidrepError):
    """A numerical failure: non-finite values, degenerate norms (CLI exit 3)."""


class DegenerateInputError(NumericalError):
    """An input is numerically degenerate (near-zero norm, zero mean)."""


def as_float_matrix(x, name: str = "array") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite values."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise MalformedInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise MalformedInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise MalformedInputError(f"{name} contains non-finite values")
    return arr


def as_float_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting non-finite values."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise MalformedInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise MalformedInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise MalformedInputError(f"{name} contains non-finite values")
    return arr


def check_finite(x: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{name} contains non-finite values")
    return x


def as_mask(mask, length: int | None = None, name: str = "mask") -> np.ndarray:
    """Coerce to a boolean vector with at least one true entry."""
    arr = np.asarray(mask, dtype=bool)
    if arr.ndim != 1:
        raise MalformedInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise DimensionMismatchError(
            f"{name} has length {arr.shape[0]}, expected {length}"
        )
    if not arr.any():
        raise MalformedInputError(f"{name} has no true entries")
    return arr


def check_unit_rows(x: np.ndarray, tol: float = 1e-5, name: str = "rows") -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if not np.allclose(norms, 1.0, atol=tol):
        worst = float(np.abs(norms - 1.0).max())
        raise MalformedInputError(
            f"{name} must be L2-normalized (max deviation {worst:.3g})"
        )
    return x
