"""Input validation helpers.

Descriptors are plain numpy arrays throughout the package: a real local or
global descriptor is a 1-D float64 vector of unit L2 norm, and a binary
descriptor is a 1-D uint8 vector of 0/1 values obtained by thresholding the
real form at zero.  The helpers here centralize the shape, finiteness, and
norm checks so every module enforces the same contracts.
"""

from __future__ import annotations

import numpy as np

# Rows whose norm deviates by more than this are rejected as corrupt input
# rather than silently rescaled.
INGEST_NORM_TOLERANCE = 1e-2

# Rows already within this tolerance of unit norm are left untouched, which
# makes normalization idempotent (repeated load/save cycles are byte-stable).
EXACT_NORM_TOLERANCE = 1e-9

# Norm tolerance promised for descriptors once they are inside the system.
UNIT_NORM_TOLERANCE = 1e-4


def as_float_matrix(values, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 array (1-D input becomes one row)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise ValueError(f"{name} has zero columns")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_float_vector(values, name: str = "x", dim: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    return arr


def as_bit_vector(values, name: str = "bits", dim: int | None = None) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    arr = arr.astype(np.uint8, copy=False)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 values")
    return arr


def check_same_dimension(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(
            f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}"
        )


def ingest_unit_rows(values, name: str = "descriptors") -> np.ndarray:
    """Normalize rows to unit L2 norm, rejecting rows that deviate too far.

    Rows within ``EXACT_NORM_TOLERANCE`` of unit length pass through
    unchanged; deviations up to ``INGEST_NORM_TOLERANCE`` are rescaled;
    anything beyond that is treated as corrupt data and raises.
    """
    arr = as_float_matrix(values, name).copy()
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > INGEST_NORM_TOLERANCE)
    if bad.size:
        raise ValueError(
            f"{name}: rows {bad[:5].tolist()} have L2 norm off unit by more "
            f"than {INGEST_NORM_TOLERANCE} (first norm {norms[bad[0]]:.6f})"
        )
    rescale = np.abs(norms - 1.0) > EXACT_NORM_TOLERANCE
    if rescale.any():
        arr[rescale] /= norms[rescale, np.newaxis]
    return arr


def check_unit_rows(values, name: str = "descriptors") -> np.ndarray:
    """Validate that rows already carry unit L2 norm (no rescaling)."""
    arr = as_float_matrix(values, name)
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE)
    if bad.size:
        raise ValueError(
            f"{name}: rows {bad[:5].tolist()} are not unit-norm within "
            f"{UNIT_NORM_TOLERANCE}; normalize on ingest first"
        )
    return arr
