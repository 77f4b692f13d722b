"""Batch loss terms for jointly shaping real and binary descriptor forms.

Three terms operate on a batch of N matched descriptor pairs (anchor,
positive), all sharing one dimension:

* a hinge triplet term with margin 1, where the negative for pair i is the
  hardest in-batch alternative: min over j != i of d(a_i, p_j) and
  d(p_i, a_j), with d the Euclidean distance;
* a second-order similarity term comparing, for each pair, anchor-side and
  positive-side distances to its nearest neighboring pairs;
* the same hinge triplet form evaluated under the weighted Hamming distance,
  which penalizes only dimensions whose sign bits disagree.

Every function returns the scalar loss together with analytic gradients for
each anchor and positive element.  The gradients use standard subgradient
conventions at kinks: inactive hinges, zero distances, and zero inner sums
contribute nothing, and the sign-mismatch indicator of the weighted distance
is held constant (it is piecewise constant in the inputs, so away from sign
boundaries the gradient is exact).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .descriptors import binarize, pairwise_l2


@dataclass(frozen=True)
class DescriptorBatch:
    """N matched (anchor, positive) descriptor pairs, N >= 2."""

    anchors: np.ndarray    # (N, D)
    positives: np.ndarray  # (N, D)

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64)
        p = np.asarray(self.positives, dtype=np.float64)
        if a.ndim != 2 or p.ndim != 2 or a.shape != p.shape:
            raise ValueError(
                f"anchors and positives must be matching 2-D arrays, got "
                f"{a.shape} vs {p.shape}"
            )
        if a.shape[0] < 2:
            raise ValueError("batch needs at least 2 pairs for negative mining")
        if not (np.isfinite(a).all() and np.isfinite(p).all()):
            raise ValueError("batch contains non-finite values")
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "positives", p)

    @property
    def size(self) -> int:
        return self.anchors.shape[0]


class LossResult(NamedTuple):
    loss: float
    grad_anchors: np.ndarray
    grad_positives: np.ndarray


def _weighted_pairwise(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted Hamming distances between all rows of A and B.

    Returns the (m, n) distance matrix and the (m, n, D) mismatch mask used
    by the gradient (sign bits held constant).
    """
    mismatch = binarize(A)[:, np.newaxis, :] != binarize(B)[np.newaxis, :, :]
    diff = A[:, np.newaxis, :] - B[np.newaxis, :, :]
    dist = np.sqrt(np.sum(diff * diff * mismatch, axis=-1))
    return dist, mismatch


def _hinge_triplet(
    batch: DescriptorBatch,
    dist_ap: np.ndarray,
    pair_dist: np.ndarray,
    grad_fn,
) -> LossResult:
    """Shared hinge machinery for the Euclidean and weighted-Hamming triplets.

    ``dist_ap[i, j]`` is d(anchor_i, positive_j); ``pair_dist[i]`` is the
    matched-pair distance d(anchor_i, positive_i).  ``grad_fn(kind, i, j)``
    returns the gradient of the relevant distance w.r.t. its two arguments.
    """
    n = batch.size
    cross = np.minimum(dist_ap, dist_ap.T)        # min of d(a_i,p_j), d(p_i,a_j)
    np.fill_diagonal(cross, np.inf)
    hardest = cross.min(axis=1)
    hardest_j = cross.argmin(axis=1)
    hinge = 1.0 + pair_dist - hardest
    active = hinge > 0.0
    loss = float(np.maximum(hinge, 0.0).mean())

    ga = np.zeros_like(batch.anchors)
    gp = np.zeros_like(batch.positives)
    inv_n = 1.0 / n
    for i in np.flatnonzero(active):
        if pair_dist[i] > 0.0:
            da, dp = grad_fn("pair", i, i)
            ga[i] += inv_n * da
            gp[i] += inv_n * dp
        j = hardest_j[i]
        if hardest[i] <= 0.0:
            continue
        if dist_ap[i, j] <= dist_ap[j, i]:
            # negative is d(anchor_i, positive_j)
            da, dp = grad_fn("cross", i, j)
            ga[i] -= inv_n * da
            gp[j] -= inv_n * dp
        else:
            # negative is d(positive_i, anchor_j) == dist_ap[j, i]
            da, dp = grad_fn("cross", j, i)
            ga[j] -= inv_n * da
            gp[i] -= inv_n * dp
    return LossResult(loss, ga, gp)


def triplet_margin_loss(batch: DescriptorBatch) -> LossResult:
    """Hinge triplet loss with in-batch hardest negatives under L2 distance."""
    A, P = batch.anchors, batch.positives
    dist_ap = pairwise_l2(A, P)
    pair_dist = np.diagonal(dist_ap).copy()

    def grad_fn(kind, i, j):
        d = dist_ap[i, j]
        u = (A[i] - P[j]) / d
        return u, -u

    return _hinge_triplet(batch, dist_ap, pair_dist, grad_fn)


def weighted_hamming_loss(batch: DescriptorBatch) -> LossResult:
    """Hinge triplet loss evaluated under the weighted Hamming distance."""
    A, P = batch.anchors, batch.positives
    dist_ap, mismatch = _weighted_pairwise(A, P)
    pair_dist = np.diagonal(dist_ap).copy()

    def grad_fn(kind, i, j):
        d = dist_ap[i, j]
        u = (A[i] - P[j]) * mismatch[i, j] / d
        return u, -u

    return _hinge_triplet(batch, dist_ap, pair_dist, grad_fn)


def sos_regularizer(batch: DescriptorBatch, neighbor_count: int = 8) -> LossResult:
    """Second-order similarity over each pair's nearest neighboring pairs.

    For pair i the neighbor set holds the ``neighbor_count`` other pairs j
    with smallest anchor distance d(a_i, a_j); the term is the RMS-style
    sqrt of summed squared differences between anchor-side and positive-side
    distances, averaged over the batch.
    """
    n = batch.size
    if not 1 <= neighbor_count <= n - 1:
        raise ValueError(
            f"neighbor_count must be in [1, N-1] = [1, {n - 1}], got {neighbor_count}"
        )
    A, P = batch.anchors, batch.positives
    d_aa = pairwise_l2(A, A)
    d_pp = pairwise_l2(P, P)

    ga = np.zeros_like(A)
    gp = np.zeros_like(P)
    total = 0.0
    inv_n = 1.0 / n
    for i in range(n):
        order = np.argsort(d_aa[i], kind="stable")
        nbrs = order[order != i][:neighbor_count]
        v = d_aa[i, nbrs] - d_pp[i, nbrs]
        s = float(np.sqrt(np.sum(v * v)))
        total += s
        if s <= 0.0:
            continue
        for v_ij, j in zip(v, nbrs):
            c = inv_n * v_ij / s
            if d_aa[i, j] > 0.0:
                w = (A[i] - A[j]) / d_aa[i, j]
                ga[i] += c * w
                ga[j] -= c * w
            if d_pp[i, j] > 0.0:
                w = (P[i] - P[j]) / d_pp[i, j]
                gp[i] -= c * w
                gp[j] += c * w
    return LossResult(total * inv_n, ga, gp)


def total_loss(batch: DescriptorBatch, sos_neighbors: int | None = None) -> LossResult:
    """Sum of the triplet, second-order, and weighted-Hamming terms.

    ``sos_neighbors`` defaults to min(8, N-1) so small batches stay usable.
    """
    if sos_neighbors is None:
        sos_neighbors = min(8, batch.size - 1)
    parts = [
        triplet_margin_loss(batch),
        sos_regularizer(batch, sos_neighbors),
        weighted_hamming_loss(batch),
    ]
    return LossResult(
        sum(p.loss for p in parts),
        sum(p.grad_anchors for p in parts),
        sum(p.grad_positives for p in parts),
    )
