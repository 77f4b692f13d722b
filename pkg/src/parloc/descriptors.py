"""Distance functions and sign binarization for descriptors.

The binary form of a descriptor keeps one bit per dimension, set exactly
when the real value is nonnegative (zero counts as positive).  The weighted
Hamming distance accumulates squared real differences only over dimensions
whose sign bits disagree, so descriptors with identical sign patterns are at
weighted distance zero no matter how their real values differ.
"""

from __future__ import annotations

import numpy as np

from .validation import as_bit_vector, as_float_vector, check_same_dimension


def binarize(values) -> np.ndarray:
    """Binary form of a real descriptor: bit k is 1 iff values[k] >= 0."""
    arr = np.asarray(values, dtype=np.float64)
    return (arr >= 0.0).astype(np.uint8)


def l2_distance(a, b) -> float:
    a = as_float_vector(a, "a")
    b = as_float_vector(b, "b")
    check_same_dimension(a, b)
    return float(np.linalg.norm(a - b))


def hamming_distance(a, b) -> int:
    a = as_bit_vector(a, "a")
    b = as_bit_vector(b, "b")
    check_same_dimension(a, b)
    return int(np.count_nonzero(a != b))


def weighted_hamming_distance(a, b) -> float:
    """sqrt of the squared real difference summed over sign-mismatched dims."""
    a = as_float_vector(a, "a")
    b = as_float_vector(b, "b")
    check_same_dimension(a, b)
    mismatch = binarize(a) != binarize(b)
    diff = a - b
    return float(np.sqrt(np.sum(diff * diff * mismatch)))


def pairwise_l2(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """All-pairs Euclidean distances between rows of A (m,D) and B (n,D)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    check_same_dimension(A, B)
    sq = (
        np.sum(A * A, axis=1)[:, np.newaxis]
        - 2.0 * (A @ B.T)
        + np.sum(B * B, axis=1)[np.newaxis, :]
    )
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq)
