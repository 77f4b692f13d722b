"""parloc: visual localization with parallel local/global candidate search.

The pipeline indexes a 3D map two ways at once: a forest of random
dimension-test trees over binarized local descriptors, searched best-first
under a Gaussian perturbation model, and a global-descriptor frame index
searched by exact nearest neighbors.  Per query feature the two candidate
sets fuse, a linear search over real descriptors with a ratio test yields
2D-3D correspondences, and P3P inside RANSAC with Gauss-Newton refinement
solves the 6-DoF camera pose.
"""

from .descriptors import (
    binarize,
    hamming_distance,
    l2_distance,
    weighted_hamming_distance,
)
from .forest import (
    PerturbationModel,
    RandomTreeForest,
    build_forest,
    build_tree,
    estimate_perturbation_model,
    leaf_log_probability,
    load_forest,
    node_probability,
    save_forest,
    traverse,
)
from .localizer import QueryImage, VisualLocalizer
from .losses import (
    DescriptorBatch,
    sos_regularizer,
    total_loss,
    triplet_margin_loss,
    weighted_hamming_loss,
)
from .mapdata import FrameRecord, LandmarkRecord, MapDatabase, QueryKeypoint
from .matching import (
    Correspondence,
    SearchConfig,
    fuse_candidates,
    match_image,
    match_query_feature,
)
from .patches import coefficient_sweep, extract_patch, patch_descriptor
from .pose import (
    CameraIntrinsics,
    CameraPose,
    LocalizationResult,
    minimal_pnp,
    pose_error,
    project,
    ransac_pnp,
    recall_at_thresholds,
)
from .retrieval import FrameRetrievalIndex, frame_candidates

__version__ = "0.1.0"

__all__ = [
    "binarize",
    "hamming_distance",
    "l2_distance",
    "weighted_hamming_distance",
    "PerturbationModel",
    "RandomTreeForest",
    "build_forest",
    "build_tree",
    "estimate_perturbation_model",
    "leaf_log_probability",
    "load_forest",
    "node_probability",
    "save_forest",
    "traverse",
    "QueryImage",
    "VisualLocalizer",
    "DescriptorBatch",
    "sos_regularizer",
    "total_loss",
    "triplet_margin_loss",
    "weighted_hamming_loss",
    "FrameRecord",
    "LandmarkRecord",
    "MapDatabase",
    "QueryKeypoint",
    "Correspondence",
    "SearchConfig",
    "fuse_candidates",
    "match_image",
    "match_query_feature",
    "coefficient_sweep",
    "extract_patch",
    "patch_descriptor",
    "CameraIntrinsics",
    "CameraPose",
    "LocalizationResult",
    "minimal_pnp",
    "pose_error",
    "project",
    "ransac_pnp",
    "recall_at_thresholds",
    "FrameRetrievalIndex",
    "frame_candidates",
]
