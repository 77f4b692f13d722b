"""Keypoint patch extraction and the patch-size coefficient sweep.

A keypoint's patch is the square of side ``scale * coefficient`` pixels
centered on the keypoint, rotated by the keypoint orientation so the output
is orientation-rectified, resampled to 32x32 with bilinear interpolation.
Keypoints too close to the border for the requested square raise
:class:`PatchOutOfBoundsError`; larger coefficients therefore lose more
border keypoints, while smaller ones capture less context, so registration
counts over a coefficient sweep rise and then fall.

Patches are turned into unit descriptors by a fixed seeded random
projection of the zero-mean patch; the same projection must be used for
database and query extraction for distances to be meaningful.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import PatchOutOfBoundsError
from .localizer import QueryImage, VisualLocalizer
from .mapdata import QueryKeypoint

PATCH_SIZE = 32
DEFAULT_COEFFICIENT = 13.0


def _bilinear(image, xs, ys):
    h, w = image.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.clip(x0, 0, w - 2)
    y0 = np.clip(y0, 0, h - 2)
    dx = xs - x0
    dy = ys - y0
    v00 = image[y0, x0]
    v01 = image[y0, x0 + 1]
    v10 = image[y0 + 1, x0]
    v11 = image[y0 + 1, x0 + 1]
    return (
        v00 * (1 - dx) * (1 - dy)
        + v01 * dx * (1 - dy)
        + v10 * (1 - dx) * dy
        + v11 * dx * dy
    )


def extract_patch(
    image: np.ndarray,
    keypoint: QueryKeypoint,
    coefficient: float = DEFAULT_COEFFICIENT,
    out_size: int = PATCH_SIZE,
) -> np.ndarray:
    """Orientation-rectified square patch around a keypoint.

    The sampling square of side ``keypoint.scale * coefficient`` is rotated
    by the keypoint orientation in the image; sample (row, col) of the
    output therefore always sees the same scene detail regardless of how
    the feature was oriented.  The whole rotated square must lie inside the
    image.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {img.shape}")
    if coefficient <= 0:
        raise ValueError(f"coefficient must be positive, got {coefficient}")
    h, w = img.shape
    side = keypoint.scale * coefficient
    u, v = keypoint.pixel
    cos_t = math.cos(keypoint.orientation)
    sin_t = math.sin(keypoint.orientation)

    half = side / 2.0
    corners = np.array([[-half, -half], [half, -half], [-half, half], [half, half]])
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    world = corners @ rot.T + np.array([u, v])
    if (
        world[:, 0].min() < 0.0
        or world[:, 1].min() < 0.0
        or world[:, 0].max() > w - 1.0
        or world[:, 1].max() > h - 1.0
    ):
        raise PatchOutOfBoundsError(
            f"patch of side {side:.1f} at ({u:.1f}, {v:.1f}) leaves the "
            f"{w}x{h} image"
        )

    # Pixel-center sampling grid in patch coordinates.
    coords = (np.arange(out_size) + 0.5) / out_size * side - half
    gx, gy = np.meshgrid(coords, coords)
    xs = u + cos_t * gx - sin_t * gy
    ys = v + sin_t * gx + cos_t * gy
    return _bilinear(img, xs, ys)


def patch_descriptor(patch: np.ndarray, dim: int, projection_seed: int = 7) -> np.ndarray:
    """Unit descriptor from a patch: seeded random projection of the
    zero-mean intensities.  Deterministic in (patch, dim, seed)."""
    flat = np.asarray(patch, dtype=np.float64).ravel()
    flat = flat - flat.mean()
    rng = np.random.default_rng(projection_seed)
    projection = rng.normal(size=(dim, flat.shape[0])) / math.sqrt(flat.shape[0])
    vec = projection @ flat
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        # Constant patch carries no signal; return a fixed unit vector.
        vec = np.zeros(dim)
        vec[0] = 1.0
        return vec
    return vec / norm


def describe_keypoints(
    image: np.ndarray,
    keypoints: np.ndarray,
    dim: int,
    coefficient: float = DEFAULT_COEFFICIENT,
    projection_seed: int = 7,
) -> tuple[np.ndarray, np.ndarray]:
    """Patch descriptors for (n, 4) keypoint rows (u, v, orientation, scale).

    Returns the kept keypoint row indices and their descriptors; keypoints
    whose patch leaves the image are dropped.
    """
    kept, descs = [], []
    for i, (u, v, orientation, scale) in enumerate(np.asarray(keypoints, dtype=np.float64)):
        kp = QueryKeypoint(np.array([u, v]), orientation, scale)
        try:
            patch = extract_patch(image, kp, coefficient)
        except PatchOutOfBoundsError:
            continue
        kept.append(i)
        descs.append(patch_descriptor(patch, dim, projection_seed))
    if not kept:
        return np.empty(0, dtype=np.int64), np.empty((0, dim))
    return np.asarray(kept, dtype=np.int64), np.vstack(descs)


def coefficient_sweep(
    image_queries,
    localizer: VisualLocalizer,
    coefficients,
    projection_seed: int = 7,
) -> list[tuple[float, int]]:
    """Registered-query counts over patch-size coefficients.

    ``image_queries`` are (query_id, image, keypoints, intrinsics,
    global_descriptor) tuples with raw images and keypoint geometry; for
    each coefficient the pipeline re-extracts descriptors, localizes every
    query against the fitted localizer, and counts status-ok results.
    """
    dim = localizer.db_.descriptor_dim
    table: list[tuple[float, int]] = []
    for coefficient in coefficients:
        registered = 0
        for qid, image, keypoints, intrinsics, global_desc in image_queries:
            kept, descs = describe_keypoints(
                image, keypoints, dim, coefficient, projection_seed
            )
            query = QueryImage(
                qid, intrinsics, global_desc,
                np.asarray(keypoints, dtype=np.float64).reshape(-1, 4)[kept],
                descs,
            )
            result, _ = localizer.localize(query)
            if result.status == "ok":
                registered += 1
        table.append((float(coefficient), registered))
    return table
