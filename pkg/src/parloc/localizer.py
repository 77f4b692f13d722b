"""End-to-end localization estimator: map in, poses out.

``VisualLocalizer`` follows the sklearn estimator protocol: construction
fixes all hyperparameters, ``fit`` ingests a :class:`MapDatabase` (building
the random-tree forest, the frame retrieval index, and the perturbation
model), and ``predict`` maps query images to localization results.  Fitted
state is immutable, so one localizer can serve queries from multiple
threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .forest import (
    PerturbationModel,
    RandomTreeForest,
    _splitmix64,
    estimate_perturbation_model,
)
from .matching import Correspondence, SearchConfig, match_image
from .mapdata import MapDatabase
from .pose import CameraIntrinsics, LocalizationResult, ransac_pnp
from .retrieval import FrameRetrievalIndex


@dataclass(frozen=True)
class QueryImage:
    """One query: intrinsics, per-image global descriptor, keypoint data."""

    query_id: int
    intrinsics: CameraIntrinsics
    global_descriptor: np.ndarray | None   # (G,), optional in tree_only mode
    keypoints: np.ndarray                  # (n, 4) u, v, orientation, scale
    descriptors: np.ndarray                # (n, D) unit rows

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 4)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        if desc.ndim != 2 or desc.shape[0] != kp.shape[0]:
            raise ValueError(
                f"descriptors {desc.shape} must align with keypoints {kp.shape}"
            )
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "descriptors", desc)
        if self.global_descriptor is not None:
            g = np.asarray(self.global_descriptor, dtype=np.float64)
            object.__setattr__(self, "global_descriptor", g)


def _query_seed(base: int, query_id: int) -> int:
    return _splitmix64(_splitmix64(base & ((1 << 64) - 1)) ^ (query_id + 0x51ED))


class VisualLocalizer(BaseEstimator):
    """Parallel local/global candidate search plus PnP-RANSAC pose solving."""

    def __init__(
        self,
        n_trees=6,
        depth=23,
        candidate_dims=64,
        mode="fused",
        max_leaves=100,
        knn_frames_k=20,
        ratio_threshold=0.8,
        strict_ratio=False,
        inlier_threshold_px=8.0,
        max_ransac_iterations=10_000,
        ransac_confidence=0.9999,
        min_inliers=12,
        perturbation_model=None,
        model_tests_to_sample=10,
        model_samples_per_test=100_000,
        random_state=0,
    ):
        self.n_trees = n_trees
        self.depth = depth
        self.candidate_dims = candidate_dims
        self.mode = mode
        self.max_leaves = max_leaves
        self.knn_frames_k = knn_frames_k
        self.ratio_threshold = ratio_threshold
        self.strict_ratio = strict_ratio
        self.inlier_threshold_px = inlier_threshold_px
        self.max_ransac_iterations = max_ransac_iterations
        self.ransac_confidence = ransac_confidence
        self.min_inliers = min_inliers
        self.perturbation_model = perturbation_model
        self.model_tests_to_sample = model_tests_to_sample
        self.model_samples_per_test = model_samples_per_test
        self.random_state = random_state

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            mode=self.mode,
            max_leaves=self.max_leaves,
            knn_frames_k=self.knn_frames_k,
            ratio_threshold=self.ratio_threshold,
            strict_ratio=self.strict_ratio,
        )

    def fit(self, map_db: MapDatabase, y=None):
        self.search_config()   # fail fast on bad search parameters
        self.db_ = map_db
        self.forest_ = RandomTreeForest(
            n_trees=self.n_trees,
            depth=self.depth,
            candidate_dims=self.candidate_dims,
            random_state=self.random_state,
        ).fit(map_db.descriptor_matrix, map_db.entry_landmark_ids)
        self.frame_index_ = FrameRetrievalIndex(n_neighbors=self.knn_frames_k).fit(
            map_db.frame_descriptor_matrix, map_db.frame_ids
        )
        if self.perturbation_model is not None:
            self.model_ = self.perturbation_model
        else:
            left, right = map_db.matched_descriptor_pairs()
            if left.shape[0] == 0:
                raise ValueError(
                    "map has no landmark with two or more descriptors; pass "
                    "perturbation_model= explicitly (for example an assumed "
                    "sigma) to skip estimation"
                )
            self.model_ = estimate_perturbation_model(
                left,
                right,
                tests_to_sample=self.model_tests_to_sample,
                samples_per_test=self.model_samples_per_test,
                seed=self.random_state,
            )
        return self

    def _check_fitted(self):
        if not hasattr(self, "forest_"):
            raise NotFittedError("localizer is not fitted; call fit(map_db) first")

    def match_image(self, descriptors, query_global=None) -> list[Correspondence]:
        """2D-3D correspondences for one image's keypoint descriptors."""
        self._check_fitted()
        return match_image(
            descriptors,
            query_global,
            self.forest_,
            self.frame_index_,
            self.db_,
            self.model_,
            self.search_config(),
        )

    def localize(self, query: QueryImage) -> tuple[LocalizationResult, list[Correspondence]]:
        """Match one query image and solve its pose."""
        self._check_fitted()
        matches = self.match_image(query.descriptors, query.global_descriptor)
        points3d = np.array([self.db_.position(m.landmark_id) for m in matches])
        pixels = np.array([query.keypoints[m.query_index, :2] for m in matches])
        if points3d.size == 0:
            points3d = points3d.reshape(0, 3)
            pixels = pixels.reshape(0, 2)
        result = ransac_pnp(
            points3d,
            pixels,
            query.intrinsics,
            inlier_threshold_px=self.inlier_threshold_px,
            max_iterations=self.max_ransac_iterations,
            confidence=self.ransac_confidence,
            min_inliers=self.min_inliers,
            seed=_query_seed(self.random_state, query.query_id),
        )
        return result, matches

    def predict(self, queries) -> list[LocalizationResult]:
        """Localization results for a batch of queries, in input order."""
        return [self.localize(q)[0] for q in queries]
