"""Candidate fusion and 2D-3D correspondence search.

For every query keypoint the tree branch contributes the landmarks found in
high-probability leaves and the retrieval branch contributes the landmarks
visible in the frames nearest to the query's global descriptor (computed
once per image, since the global descriptor is per-image).  The fused
candidate set is their union, so it can only grow relative to either branch
alone.  A linear search over the real descriptors of all candidate
landmarks picks the nearest; the match is kept when the distance ratio
against the best descriptor of any *other* landmark passes the threshold,
so multiple views of one 3D point never suppress their own match.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forest import PerturbationModel, RandomTreeForest
from .mapdata import MapDatabase
from .retrieval import FrameRetrievalIndex, frame_candidates
from .validation import as_float_vector

MODES = ("fused", "tree_only", "retrieval_only")


@dataclass(frozen=True)
class SearchConfig:
    """Per-image search behavior: branch selection, budgets, ratio test."""

    mode: str = "fused"
    max_leaves: int = 100
    knn_frames_k: int = 20
    ratio_threshold: float = 0.8
    strict_ratio: bool = False   # reject single-landmark candidate sets

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_leaves < 1:
            raise ValueError(f"max_leaves must be >= 1, got {self.max_leaves}")
        if self.knn_frames_k < 1:
            raise ValueError(f"knn_frames_k must be >= 1, got {self.knn_frames_k}")
        if not 0.0 < self.ratio_threshold <= 1.0:
            raise ValueError(
                f"ratio_threshold must be in (0, 1], got {self.ratio_threshold}"
            )


@dataclass(frozen=True)
class Correspondence:
    query_index: int
    landmark_id: int
    distance: float
    ratio: float


def fuse_candidates(tree_set: set[int], frame_set: set[int]) -> set[int]:
    """Union of the two branches' candidate landmark ids."""
    return set(tree_set) | set(frame_set)


def match_query_feature(
    query: np.ndarray,
    candidate_ids,
    db: MapDatabase,
    ratio_threshold: float = 0.8,
    strict_ratio: bool = False,
) -> tuple[int, float, float] | None:
    """Nearest-landmark match with the distance ratio test.

    Searches every descriptor of every candidate landmark; the second
    distance is the best over descriptors of a different landmark.  With a
    single candidate landmark the second distance is +inf, giving ratio 0
    (accepted) unless ``strict_ratio`` is set.  Returns (landmark id,
    distance, ratio) or None; absence of a match is a value, not an error.
    """
    ids = sorted(int(c) for c in candidate_ids)
    if not ids:
        return None
    if strict_ratio and len(ids) == 1:
        return None
    q = as_float_vector(query, "query", dim=db.descriptor_dim)

    rows = np.concatenate([db.landmark_rows(lid) for lid in ids])
    dists = np.linalg.norm(db.descriptor_matrix[rows] - q, axis=1)
    best = int(np.argmin(dists))
    best_lid = int(db.entry_landmark_ids[rows[best]])
    d1 = float(dists[best])

    other = db.entry_landmark_ids[rows] != best_lid
    if other.any():
        d2 = float(dists[other].min())
        if d2 > 0.0:
            ratio = d1 / d2
        else:
            ratio = 1.0   # indistinguishable duplicates across landmarks
    else:
        ratio = 0.0       # lone candidate landmark, second distance is +inf
    if ratio > ratio_threshold:
        return None
    return best_lid, d1, ratio


def match_image(
    descriptors: np.ndarray,
    query_global: np.ndarray | None,
    forest: RandomTreeForest,
    frame_index: FrameRetrievalIndex,
    db: MapDatabase,
    model: PerturbationModel,
    config: SearchConfig,
) -> list[Correspondence]:
    """Correspondences for all keypoint descriptors of one query image.

    The retrieval branch runs once and its candidate set is shared by every
    keypoint; the tree branch runs per keypoint.  Results keep keypoint
    order, and identical inputs always produce identical correspondences.
    """
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.ndim != 2 or descriptors.shape[1] != db.descriptor_dim:
        raise ValueError(
            f"descriptors must be (n, {db.descriptor_dim}), got {descriptors.shape}"
        )

    retrieval_set: set[int] = set()
    if config.mode != "tree_only":
        if query_global is None:
            raise ValueError(f"mode {config.mode!r} needs a query global descriptor")
        nearest = frame_index.knn_frames(query_global, config.knn_frames_k)
        retrieval_set = frame_candidates([fid for fid, _ in nearest], db)

    matches: list[Correspondence] = []
    for i in range(descriptors.shape[0]):
        tree_set: set[int] = set()
        if config.mode != "retrieval_only":
            result = forest.priority_search(descriptors[i], model, config.max_leaves)
            tree_set = set(
                int(l) for l in forest.candidate_landmarks(result.candidate_rows)
            )
        fused = fuse_candidates(tree_set, retrieval_set)
        hit = match_query_feature(
            descriptors[i], fused, db, config.ratio_threshold, config.strict_ratio
        )
        if hit is not None:
            lid, dist, ratio = hit
            matches.append(Correspondence(i, lid, dist, ratio))
    return matches
