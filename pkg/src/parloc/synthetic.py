"""Deterministic synthetic fixtures: maps, camera scenes, benchmarks.

Everything here is seeded and reproducible.  The generators serve two
consumers: the test suite, which uses them as ground-truth oracles (planted
correspondences, known poses, known perturbations), and the ``selftest``
CLI command, which runs invariant checks on generated data.

The bimodal benchmark builds a scene where half the queries carry heavily
perturbed local descriptors (their sign patterns scramble, so tree search
misses, but global retrieval still points at the right frames) and half
carry clean local descriptors with a globally ambiguous global descriptor
(retrieval lands on decoy frames observing unrelated landmarks, while tree
search still finds the true neighbors).  Candidate fusion is the only mode
that registers both halves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .localizer import QueryImage
from .mapdata import FrameRecord, LandmarkRecord, MapDatabase
from .pose import CameraIntrinsics, CameraPose, project_many
from .pose import _rodrigues   # exp map shared with the solver

DEFAULT_INTRINSICS = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
IMAGE_WIDTH = 640
IMAGE_HEIGHT = 480


def random_unit_vectors(rng, n: int, dim: int) -> np.ndarray:
    X = rng.normal(size=(n, dim))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def perturb_unit_vectors(rng, X: np.ndarray, sigma: float) -> np.ndarray:
    """Per-element Gaussian perturbation followed by renormalization."""
    Y = X + rng.normal(scale=sigma, size=X.shape)
    return Y / np.linalg.norm(Y, axis=1, keepdims=True)


def embed_positions(centers: np.ndarray, global_dim: int, seed: int = 31) -> np.ndarray:
    """Unit global descriptors from 3D positions via a fixed affine map.

    Nearby camera centers produce nearby descriptors, which is all the
    retrieval branch needs from a global descriptor.
    """
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(global_dim, 3)) / math.sqrt(3.0)
    b = rng.normal(size=global_dim) * 0.8
    G = np.atleast_2d(centers) @ A.T + b
    return G / np.linalg.norm(G, axis=1, keepdims=True)


def make_map_database(
    seed: int = 0,
    n_landmarks: int = 50,
    n_frames: int = 8,
    descriptor_dim: int = 16,
    global_dim: int = 8,
    descriptors_per_landmark: int = 2,
    pair_sigma: float = 0.05,
) -> MapDatabase:
    """Structurally valid random map (no camera geometry).

    Extra descriptors of a landmark are sigma-perturbations of its first,
    so the perturbation-model estimator has matched pairs to fit.  Frames
    get random unit globals and random visibility covering every landmark.
    """
    rng = np.random.default_rng(seed)
    landmarks = {}
    for lid in range(n_landmarks):
        base = random_unit_vectors(rng, 1, descriptor_dim)
        if descriptors_per_landmark > 1:
            extra = perturb_unit_vectors(
                rng,
                np.repeat(base, descriptors_per_landmark - 1, axis=0),
                pair_sigma,
            )
            descs = np.vstack([base, extra])
        else:
            descs = base
        landmarks[lid] = LandmarkRecord(lid, rng.uniform(-10, 10, size=3), descs)

    frames = {}
    lids = np.arange(n_landmarks)
    for fid in range(n_frames):
        count = int(rng.integers(max(1, n_landmarks // 3), n_landmarks + 1))
        visible = set(rng.choice(lids, size=count, replace=False).tolist())
        visible.update(lids[fid::n_frames].tolist())   # cover every landmark
        frames[fid] = FrameRecord(
            fid, random_unit_vectors(rng, 1, global_dim)[0], frozenset(visible)
        )
    return MapDatabase(landmarks, frames)


# ---------------------------------------------------------------------------
# Camera scenes
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    db: MapDatabase
    queries: list[QueryImage]
    ground_truth: dict[int, CameraPose]
    planted: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    labels: dict[int, str] = field(default_factory=dict)


def _camera_pose(rng, center, tilt: float = 0.12) -> CameraPose:
    R = _rodrigues(rng.normal(size=3) * tilt)
    return CameraPose(R, -R @ np.asarray(center, dtype=np.float64))


def _visible_landmark_ids(pose, positions, landmark_ids, intrinsics) -> np.ndarray:
    pixels, valid = project_many(pose, intrinsics, positions)
    inside = valid.copy()
    inside[valid] &= (
        (pixels[valid, 0] >= 0)
        & (pixels[valid, 0] <= IMAGE_WIDTH - 1)
        & (pixels[valid, 1] >= 0)
        & (pixels[valid, 1] <= IMAGE_HEIGHT - 1)
    )
    return landmark_ids[inside]


def make_localization_scene(
    seed: int = 0,
    n_landmarks: int = 400,
    n_frames: int = 30,
    n_queries: int = 20,
    keypoints_per_query: int = 40,
    descriptor_dim: int = 32,
    global_dim: int = 16,
    query_sigma: float = 0.03,
    pair_sigma: float = 0.03,
    pixel_noise: float = 0.0,
    global_noise: float = 0.01,
) -> Scene:
    """Geometrically consistent scene with planted correspondences.

    Landmarks live in a box in front of the cameras; frames are cameras
    with frustum-derived visibility and position-embedded globals; each
    query jitters a frame pose, projects a sample of its visible landmarks,
    and perturbs their descriptors.
    """
    rng = np.random.default_rng(seed)
    positions = np.column_stack([
        rng.uniform(-6, 6, n_landmarks),
        rng.uniform(-4, 4, n_landmarks),
        rng.uniform(8, 16, n_landmarks),
    ])
    base_descs = random_unit_vectors(rng, n_landmarks, descriptor_dim)
    landmark_ids = np.arange(n_landmarks)

    landmarks = {}
    for lid in range(n_landmarks):
        pair = perturb_unit_vectors(rng, base_descs[lid:lid + 1], pair_sigma)
        landmarks[lid] = LandmarkRecord(
            lid, positions[lid], np.vstack([base_descs[lid], pair])
        )

    centers = np.column_stack([
        rng.uniform(-2.5, 2.5, n_frames),
        rng.uniform(-1.5, 1.5, n_frames),
        rng.uniform(-1.0, 0.0, n_frames),
    ])
    poses = [_camera_pose(rng, c) for c in centers]
    globals_ = embed_positions(centers, global_dim)

    visible_sets = []
    for pose in poses:
        visible_sets.append(
            set(_visible_landmark_ids(pose, positions, landmark_ids, DEFAULT_INTRINSICS).tolist())
        )
    # Guarantee coverage: attach orphans to the nearest camera.
    covered = set().union(*visible_sets)
    for lid in range(n_landmarks):
        if lid not in covered:
            nearest = int(np.argmin(np.linalg.norm(centers - positions[lid], axis=1)))
            visible_sets[nearest].add(lid)

    frames = {
        fid: FrameRecord(fid, globals_[fid], frozenset(visible_sets[fid]))
        for fid in range(n_frames)
    }
    db = MapDatabase(landmarks, frames)

    queries, ground_truth, planted = [], {}, {}
    for qid in range(n_queries):
        fid = int(rng.integers(0, n_frames))
        center = centers[fid] + rng.normal(scale=0.1, size=3)
        pose = _camera_pose(rng, center, tilt=0.05)
        vis = _visible_landmark_ids(pose, positions, landmark_ids, DEFAULT_INTRINSICS)
        vis = np.array(sorted(set(vis.tolist()) & visible_sets[fid]))
        k = min(keypoints_per_query, vis.size)
        chosen = rng.choice(vis, size=k, replace=False)
        pixels, _ = project_many(pose, DEFAULT_INTRINSICS, positions[chosen])
        if pixel_noise > 0:
            pixels = pixels + rng.normal(scale=pixel_noise, size=pixels.shape)
        kps = np.column_stack([
            pixels,
            rng.uniform(-math.pi, math.pi, k),
            np.full(k, 2.0),
        ])
        descs = perturb_unit_vectors(rng, base_descs[chosen], query_sigma)
        gdesc = embed_positions(center[np.newaxis], global_dim)[0]
        gdesc = gdesc + rng.normal(scale=global_noise, size=global_dim)
        gdesc /= np.linalg.norm(gdesc)
        queries.append(QueryImage(qid, DEFAULT_INTRINSICS, gdesc, kps, descs))
        ground_truth[qid] = pose
        planted[qid] = [(i, int(lid)) for i, lid in enumerate(chosen)]
    return Scene(db, queries, ground_truth, planted)


def make_bimodal_benchmark(
    seed: int = 0,
    n_landmarks: int = 1000,
    n_decoy_landmarks: int = 100,
    n_frames: int = 40,
    n_decoy_frames: int = 25,
    n_queries_per_type: int = 100,
    keypoints_per_query: int = 32,
    descriptor_dim: int = 64,
    global_dim: int = 16,
    light_sigma: float = 0.02,
    heavy_sigma: float = 0.12,
) -> Scene:
    """Benchmark with two failure modes that candidate fusion must bridge.

    ``labels[qid]`` is ``"local_noise"`` for queries whose local descriptors
    are heavily perturbed (tree branch starved) and ``"global_alias"`` for
    queries whose global descriptor points at decoy frames (retrieval branch
    starved).
    """
    rng = np.random.default_rng(seed)
    positions = np.column_stack([
        rng.uniform(-6, 6, n_landmarks),
        rng.uniform(-4, 4, n_landmarks),
        rng.uniform(8, 16, n_landmarks),
    ])
    base_descs = random_unit_vectors(rng, n_landmarks, descriptor_dim)
    landmark_ids = np.arange(n_landmarks)

    landmarks = {}
    for lid in range(n_landmarks):
        pair = perturb_unit_vectors(rng, base_descs[lid:lid + 1], light_sigma)
        landmarks[lid] = LandmarkRecord(
            lid, positions[lid], np.vstack([base_descs[lid], pair])
        )
    # Decoy landmarks: real entries of the map, just never the right answer.
    decoy_ids = np.arange(n_landmarks, n_landmarks + n_decoy_landmarks)
    decoy_descs = random_unit_vectors(rng, n_decoy_landmarks, descriptor_dim)
    for i, lid in enumerate(decoy_ids):
        pos = np.array([
            rng.uniform(-6, 6), rng.uniform(-4, 4), rng.uniform(8, 16),
        ])
        pair = perturb_unit_vectors(rng, decoy_descs[i:i + 1], light_sigma)
        landmarks[int(lid)] = LandmarkRecord(
            int(lid), pos, np.vstack([decoy_descs[i], pair])
        )

    centers = np.column_stack([
        rng.uniform(-2.5, 2.5, n_frames),
        rng.uniform(-1.5, 1.5, n_frames),
        rng.uniform(-1.0, 0.0, n_frames),
    ])
    poses = [_camera_pose(rng, c) for c in centers]
    globals_ = embed_positions(centers, global_dim)
    visible_sets = []
    for pose in poses:
        visible_sets.append(
            set(_visible_landmark_ids(pose, positions, landmark_ids, DEFAULT_INTRINSICS).tolist())
        )
    covered = set().union(*visible_sets)
    for lid in range(n_landmarks):
        if lid not in covered:
            nearest = int(np.argmin(np.linalg.norm(centers - positions[lid], axis=1)))
            visible_sets[nearest].add(lid)

    frames = {
        fid: FrameRecord(fid, globals_[fid], frozenset(visible_sets[fid]))
        for fid in range(n_frames)
    }
    # Decoy frames: tight global-descriptor cluster observing only decoys.
    alias_anchor = random_unit_vectors(rng, 1, global_dim)[0]
    for i in range(n_decoy_frames):
        fid = n_frames + i
        g = alias_anchor + rng.normal(scale=0.002, size=global_dim)
        frames[fid] = FrameRecord(
            fid, g / np.linalg.norm(g), frozenset(int(l) for l in decoy_ids)
        )
    db = MapDatabase(landmarks, frames)

    queries, ground_truth, planted, labels = [], {}, {}, {}
    qid = 0
    for label, sigma in (("local_noise", heavy_sigma), ("global_alias", light_sigma)):
        for _ in range(n_queries_per_type):
            fid = int(rng.integers(0, n_frames))
            center = centers[fid] + rng.normal(scale=0.1, size=3)
            pose = _camera_pose(rng, center, tilt=0.05)
            vis = _visible_landmark_ids(pose, positions, landmark_ids, DEFAULT_INTRINSICS)
            vis = np.array(sorted(set(vis.tolist()) & visible_sets[fid]))
            k = min(keypoints_per_query, vis.size)
            chosen = rng.choice(vis, size=k, replace=False)
            pixels, _ = project_many(pose, DEFAULT_INTRINSICS, positions[chosen])
            kps = np.column_stack([
                pixels,
                rng.uniform(-math.pi, math.pi, k),
                np.full(k, 2.0),
            ])
            descs = perturb_unit_vectors(rng, base_descs[chosen], sigma)
            if label == "local_noise":
                g = embed_positions(center[np.newaxis], global_dim)[0]
                g = g + rng.normal(scale=0.01, size=global_dim)
            else:
                g = alias_anchor + rng.normal(scale=0.002, size=global_dim)
            g /= np.linalg.norm(g)
            queries.append(QueryImage(qid, DEFAULT_INTRINSICS, g, kps, descs))
            ground_truth[qid] = pose
            planted[qid] = [(i, int(lid)) for i, lid in enumerate(chosen)]
            labels[qid] = label
            qid += 1
    return Scene(db, queries, ground_truth, planted, labels)


# ---------------------------------------------------------------------------
# Patch scene (image-based fixture for the coefficient sweep)
# ---------------------------------------------------------------------------

def smooth_texture(rng, size: int = 480, cells: int = 120) -> np.ndarray:
    """Band-limited random texture in [0.05, 0.95] with ~size/cells px grain."""
    small = rng.uniform(size=(cells, cells))
    scale = size / cells
    ys = (np.arange(size) + 0.5) / scale - 0.5
    xs = ys
    y0 = np.clip(np.floor(ys).astype(int), 0, cells - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, cells - 2)
    dy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    dx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    img = (
        small[np.ix_(y0, x0)] * (1 - dy) * (1 - dx)
        + small[np.ix_(y0, x0 + 1)] * (1 - dy) * dx
        + small[np.ix_(y0 + 1, x0)] * dy * (1 - dx)
        + small[np.ix_(y0 + 1, x0 + 1)] * dy * dx
    )
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / (hi - lo)


@dataclass
class PatchScene:
    db: MapDatabase
    image_queries: list   # (query_id, image, keypoints, intrinsics, global)
    reference_coefficient: float
    projection_seed: int


def make_patch_scene(
    seed: int = 0,
    n_queries: int = 12,
    image_size: int = 480,
    grid: int = 8,
    margin: float = 28.0,
    depth: float = 10.0,
    descriptor_dim: int = 32,
    global_dim: int = 8,
    reference_coefficient: float = 13.0,
    noise_low: float = 0.005,
    noise_high: float = 0.06,
    projection_seed: int = 7,
) -> PatchScene:
    """Image fixture whose registration rate peaks at the map's coefficient.

    The map descriptors come from patches extracted at
    ``reference_coefficient`` on a clean texture; queries re-extract at
    sweep coefficients from noisy copies, with per-query noise ramping from
    ``noise_low`` to ``noise_high``.  Zoom mismatch plus noise kills matches
    away from the reference, and large coefficients additionally lose
    border keypoints to the bounds check.
    """
    from .patches import describe_keypoints   # local import avoids a cycle

    rng = np.random.default_rng(seed)
    image = smooth_texture(rng, image_size)
    intr = CameraIntrinsics(400.0, 400.0, image_size / 2.0, image_size / 2.0)

    coords = np.linspace(margin, image_size - 1 - margin, grid)
    us, vs = [a.ravel() for a in np.meshgrid(coords, coords)]
    n_kp = us.size
    orientations = rng.uniform(-math.pi, math.pi, n_kp)
    keypoints = np.column_stack([us, vs, orientations, np.full(n_kp, 2.0)])

    _, base_descs = describe_keypoints(
        image, keypoints, descriptor_dim, reference_coefficient, projection_seed
    )
    if base_descs.shape[0] != n_kp:
        raise RuntimeError("reference coefficient must keep every grid keypoint")

    landmarks = {}
    for lid in range(n_kp):
        ray = np.array([(us[lid] - intr.cx) / intr.fx, (vs[lid] - intr.cy) / intr.fy, 1.0])
        landmarks[lid] = LandmarkRecord(lid, depth * ray, base_descs[lid:lid + 1])
    frame_globals = random_unit_vectors(rng, 2, global_dim)
    all_ids = frozenset(range(n_kp))
    frames = {
        0: FrameRecord(0, frame_globals[0], all_ids),
        1: FrameRecord(1, frame_globals[1], all_ids),
    }
    db = MapDatabase(landmarks, frames)

    image_queries = []
    noise_levels = np.linspace(noise_low, noise_high, n_queries)
    for qid, noise in enumerate(noise_levels):
        noisy = np.clip(image + rng.normal(scale=noise, size=image.shape), 0.0, 1.0)
        g = frame_globals[0] + rng.normal(scale=0.01, size=global_dim)
        image_queries.append(
            (qid, noisy, keypoints.copy(), intr, g / np.linalg.norm(g))
        )
    return PatchScene(db, image_queries, reference_coefficient, projection_seed)
