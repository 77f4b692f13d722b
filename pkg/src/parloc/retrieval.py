"""Global-descriptor frame retrieval and candidate expansion.

Retrieval is a brute-force K-nearest-frames search under Euclidean distance;
on unit-norm descriptors this ranks identically to cosine similarity, and
database sizes here (thousands of frames) make an approximate structure
unnecessary.  Retrieved frames expand to the union of landmarks they
observe, the retrieval-side candidate set for every keypoint of the image.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .mapdata import MapDatabase
from .validation import as_float_vector, check_unit_rows


class FrameRetrievalIndex(BaseEstimator):
    """Exact nearest-frame lookup over unit-norm global descriptors."""

    def __init__(self, n_neighbors=20):
        self.n_neighbors = n_neighbors

    def fit(self, X, frame_ids):
        X = check_unit_rows(X, "X")
        ids = np.asarray(frame_ids, dtype=np.int64)
        if ids.shape != (X.shape[0],):
            raise ValueError("frame_ids must hold one id per descriptor row")
        if X.shape[0] == 0:
            raise ValueError("cannot build an index over zero frames")
        self.descriptors_ = X
        self.frame_ids_ = ids
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "descriptors_"):
            raise NotFittedError("index is not fitted; call fit(X, frame_ids) first")

    def knn_frames(self, query, k: int | None = None) -> list[tuple[int, float]]:
        """The k frames nearest to ``query``, ascending distance.

        Ties break toward the smaller frame id; fewer than k stored frames
        returns all of them.
        """
        self._check_fitted()
        if k is None:
            k = self.n_neighbors
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q = as_float_vector(query, "query", dim=self.n_features_in_)
        dists = np.linalg.norm(self.descriptors_ - q, axis=1)
        order = np.lexsort((self.frame_ids_, dists))[:k]
        return [(int(self.frame_ids_[i]), float(dists[i])) for i in order]


def frame_candidates(frame_ids, db: MapDatabase) -> set[int]:
    """Deduplicated union of landmarks visible in the given frames."""
    out: set[int] = set()
    for fid in frame_ids:
        fid = int(fid)
        if fid not in db.frames:
            raise KeyError(f"unknown frame id {fid}")
        out |= db.frames[fid].visible_landmarks
    return out
