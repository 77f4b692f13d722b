"""6-DoF camera pose from 2D-3D correspondences: P3P, RANSAC, refinement.

Poses map world points into the camera frame, ``p_cam = R p_world + t``.
The minimal solver recovers up to four algebraic pose candidates from three
correspondences (classic side-length quartic) and disambiguates with a
fourth point; RANSAC wraps it with adaptive iteration counts, and accepted
models are polished by damped Gauss-Newton on the inlier reprojection
error, which never increases the inlier cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import DegenerateGeometryError


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with optional two-term radial distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform; rotation is proper orthonormal."""

    rotation: np.ndarray      # (3, 3)
    translation: np.ndarray   # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"bad pose shapes: R {R.shape}, t {t.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class LocalizationResult:
    """Outcome of localizing one query image."""

    pose: CameraPose | None
    inlier_indices: frozenset = field(default_factory=frozenset)
    iterations_used: int = 0
    status: str = "ok"   # ok | insufficient_matches | ransac_failed

    def __post_init__(self):
        if self.status not in ("ok", "insufficient_matches", "ransac_failed"):
            raise ValueError(f"unknown status {self.status!r}")
        if (self.pose is not None) != (self.status == "ok"):
            raise ValueError("pose must be present exactly when status is ok")
        if self.pose is not None and not self.inlier_indices:
            raise ValueError("a successful result must carry inliers")
        object.__setattr__(self, "inlier_indices", frozenset(self.inlier_indices))


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def _distort(x, y, intr):
    r2 = x * x + y * y
    f = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    return x * f, y * f


def project(pose: CameraPose, intrinsics: CameraIntrinsics, point3d) -> np.ndarray:
    """Pinhole projection of one world point; the point must be in front."""
    p = np.asarray(point3d, dtype=np.float64)
    pc = pose.rotation @ p + pose.translation
    if pc[2] <= 0.0:
        raise ValueError(f"point has nonpositive depth {pc[2]}")
    x, y = _distort(pc[0] / pc[2], pc[1] / pc[2], intrinsics)
    return np.array([intrinsics.fx * x + intrinsics.cx,
                     intrinsics.fy * y + intrinsics.cy])


def project_many(pose, intrinsics, points3d) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns pixels and a positive-depth mask.

    Rows with nonpositive depth hold NaN pixels and are marked invalid.
    """
    pts = np.asarray(points3d, dtype=np.float64)
    pc = pts @ pose.rotation.T + pose.translation
    valid = pc[:, 2] > 0.0
    pixels = np.full((pts.shape[0], 2), np.nan)
    if valid.any():
        x = pc[valid, 0] / pc[valid, 2]
        y = pc[valid, 1] / pc[valid, 2]
        xd, yd = _distort(x, y, intrinsics)
        pixels[valid, 0] = intrinsics.fx * xd + intrinsics.cx
        pixels[valid, 1] = intrinsics.fy * yd + intrinsics.cy
    return pixels, valid


def reprojection_errors(pose, intrinsics, points3d, pixels) -> np.ndarray:
    """Per-correspondence pixel error; +inf for points behind the camera."""
    proj, valid = project_many(pose, intrinsics, points3d)
    errs = np.full(proj.shape[0], np.inf)
    errs[valid] = np.linalg.norm(proj[valid] - np.asarray(pixels)[valid], axis=1)
    return errs


def _undistort_normalized(xd, yd, intr, iterations=12):
    # Fixed-point inversion of the radial model; exact when k1 = k2 = 0.
    if intr.k1 == 0.0 and intr.k2 == 0.0:
        return xd, yd
    x, y = xd, yd
    for _ in range(iterations):
        r2 = x * x + y * y
        f = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
        x, y = xd / f, yd / f
    return x, y


def bearing_vectors(pixels, intrinsics) -> np.ndarray:
    """Unit camera-frame rays for an array of pixel observations."""
    px = np.asarray(pixels, dtype=np.float64)
    out = np.empty((px.shape[0], 3))
    for i, (u, v) in enumerate(px):
        x = (u - intrinsics.cx) / intrinsics.fx
        y = (v - intrinsics.cy) / intrinsics.fy
        x, y = _undistort_normalized(x, y, intrinsics)
        ray = np.array([x, y, 1.0])
        out[i] = ray / np.linalg.norm(ray)
    return out


# ---------------------------------------------------------------------------
# Minimal solver
# ---------------------------------------------------------------------------

def _absolute_orientation(world_pts, cam_pts) -> CameraPose:
    """Rigid transform with cam = R world + t, least squares over the points."""
    w_mean = world_pts.mean(axis=0)
    c_mean = cam_pts.mean(axis=0)
    H = (world_pts - w_mean).T @ (cam_pts - c_mean)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    # Polish orthonormality so downstream pose validation at 1e-9 holds.
    Ur, _, Vtr = np.linalg.svd(R)
    R = Ur @ Vtr
    t = c_mean - R @ w_mean
    return CameraPose(R, t)


def _check_non_degenerate(points3d):
    p = np.asarray(points3d, dtype=np.float64)
    d01 = np.linalg.norm(p[1] - p[0])
    d02 = np.linalg.norm(p[2] - p[0])
    d12 = np.linalg.norm(p[2] - p[1])
    scale = max(d01, d02, d12)
    if scale <= 0.0 or min(d01, d02, d12) < 1e-12 * max(scale, 1.0):
        raise DegenerateGeometryError("coincident 3D points")
    cross = np.cross(p[1] - p[0], p[2] - p[0])
    if np.linalg.norm(cross) < 1e-10 * scale * scale:
        raise DegenerateGeometryError("collinear 3D points")


def p3p_solutions(points3d, bearings) -> list[CameraPose]:
    """Algebraic pose candidates from three correspondences.

    ``bearings`` are unit camera-frame rays toward the three points.  The
    camera-to-point side lengths satisfy a quartic; each positive real root
    yields one candidate, so at most four are returned.  Degenerate
    geometry raises.
    """
    pts = np.asarray(points3d, dtype=np.float64)
    f = np.asarray(bearings, dtype=np.float64)
    if pts.shape != (3, 3) or f.shape != (3, 3):
        raise ValueError("p3p needs exactly three points and three bearings")
    _check_non_degenerate(pts)

    a = np.linalg.norm(pts[1] - pts[2])
    b = np.linalg.norm(pts[0] - pts[2])
    c = np.linalg.norm(pts[0] - pts[1])
    cos_a = float(f[1] @ f[2])
    cos_b = float(f[0] @ f[2])
    cos_c = float(f[0] @ f[1])

    # With s_i the camera-to-point distances and u = s2/s1, v = s3/s1, the
    # law of cosines gives two ratio equations; eliminating u leaves a
    # quartic in v.  Polynomial arithmetic keeps the expansion exact.
    m = (a * a - c * c) / (b * b)
    q_poly = np.array([1.0, -2.0 * cos_b, 1.0])                  # 1 - 2 cos_b v + v^2
    u_num = np.array([1.0 + m, -2.0 * m * cos_b, m - 1.0])
    u_den = np.array([2.0 * cos_c, -2.0 * cos_a])
    den2 = npoly.polymul(u_den, u_den)
    quartic = npoly.polyadd(den2, npoly.polymul(u_num, u_num))
    quartic = npoly.polysub(quartic, 2.0 * cos_c * npoly.polymul(u_num, u_den))
    quartic = npoly.polysub(quartic, (c * c) / (b * b) * npoly.polymul(q_poly, den2))
    roots = npoly.polyroots(quartic)
    dquartic = npoly.polyder(quartic)

    poses = []
    for v in roots:
        if abs(v.imag) > 1e-8 * (1.0 + abs(v.real)):
            continue
        v = float(v.real)
        # Newton polish: companion-matrix roots of ill-conditioned quartics
        # can be a few ulp-millions off.
        for _ in range(3):
            dq = float(npoly.polyval(v, dquartic))
            if dq == 0.0:
                break
            v -= float(npoly.polyval(v, quartic)) / dq
        if v <= 0.0:
            continue
        den = float(npoly.polyval(v, u_den))
        if abs(den) < 1e-12:
            continue
        u = float(npoly.polyval(v, u_num)) / den
        if u <= 0.0:
            continue
        qv = float(npoly.polyval(v, q_poly))
        if qv <= 0.0:
            continue
        s1 = b / math.sqrt(qv)
        cam_pts = np.vstack([s1 * f[0], s1 * u * f[1], s1 * v * f[2]])
        poses.append(_absolute_orientation(pts, cam_pts))
    return poses


def minimal_pnp(points3d, pixels, intrinsics) -> CameraPose:
    """Pose from four correspondences: P3P on the first three, the fourth
    picks the candidate with the smallest reprojection error."""
    pts = np.asarray(points3d, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.float64)
    if pts.shape != (4, 3) or px.shape != (4, 2):
        raise ValueError("minimal_pnp needs exactly four correspondences")
    bearings = bearing_vectors(px[:3], intrinsics)
    candidates = p3p_solutions(pts[:3], bearings)
    if not candidates:
        raise DegenerateGeometryError("no algebraic pose solution")
    best, best_err = None, np.inf
    for pose in candidates:
        errs = reprojection_errors(pose, intrinsics, pts, px)
        err = float(errs[3])
        if err < best_err:
            best, best_err = pose, err
    if best is None or not np.isfinite(best_err):
        raise DegenerateGeometryError("all pose candidates placed points behind the camera")
    # Near-double quartic roots limit the algebraic candidate to ~1e-5; a
    # short local polish on the four points restores full precision.
    return refine_pose(best, intrinsics, pts, px, max_iterations=3)


# ---------------------------------------------------------------------------
# Refinement and RANSAC
# ---------------------------------------------------------------------------

def _rodrigues(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    K = np.array([
        [0.0, -omega[2], omega[1]],
        [omega[2], 0.0, -omega[0]],
        [-omega[1], omega[0], 0.0],
    ])
    if theta < 1e-12:
        return np.eye(3) + K
    return (
        np.eye(3)
        + math.sin(theta) / theta * K
        + (1.0 - math.cos(theta)) / (theta * theta) * (K @ K)
    )


def _residuals_and_jacobian(pose, intrinsics, pts, px):
    """Stacked 2n residuals and the (2n, 6) Jacobian in (omega, t) increments."""
    n = pts.shape[0]
    R, t = pose.rotation, pose.translation
    pc = pts @ R.T + t
    if (pc[:, 2] <= 0.0).any():
        return None, None
    x = pc[:, 0] / pc[:, 2]
    y = pc[:, 1] / pc[:, 2]
    r2 = x * x + y * y
    fdist = 1.0 + intrinsics.k1 * r2 + intrinsics.k2 * r2 * r2
    dfdr2 = intrinsics.k1 + 2.0 * intrinsics.k2 * r2

    u = intrinsics.fx * x * fdist + intrinsics.cx
    v = intrinsics.fy * y * fdist + intrinsics.cy
    res = np.column_stack([u, v]) - px

    du_dx = intrinsics.fx * (fdist + x * dfdr2 * 2.0 * x)
    du_dy = intrinsics.fx * x * dfdr2 * 2.0 * y
    dv_dx = intrinsics.fy * y * dfdr2 * 2.0 * x
    dv_dy = intrinsics.fy * (fdist + y * dfdr2 * 2.0 * y)

    J = np.zeros((2 * n, 6))
    for i in range(n):
        X, Y, Z = pc[i]
        J_xy_pc = np.array([
            [1.0 / Z, 0.0, -X / (Z * Z)],
            [0.0, 1.0 / Z, -Y / (Z * Z)],
        ])
        J_uv_xy = np.array([
            [du_dx[i], du_dy[i]],
            [dv_dx[i], dv_dy[i]],
        ])
        J_uv_pc = J_uv_xy @ J_xy_pc
        rp = pc[i] - t   # equals R @ pts[i]
        skew = np.array([
            [0.0, -rp[2], rp[1]],
            [rp[2], 0.0, -rp[0]],
            [-rp[1], rp[0], 0.0],
        ])
        J[2 * i:2 * i + 2, :3] = J_uv_pc @ (-skew)
        J[2 * i:2 * i + 2, 3:] = J_uv_pc
    return res.ravel(), J


def refine_pose(
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    points3d,
    pixels,
    max_iterations: int = 20,
    step_tolerance: float = 1e-10,
) -> CameraPose:
    """Damped Gauss-Newton on the total squared reprojection error.

    Steps that fail to decrease the cost are halved (up to 20 times) and
    finally rejected, so the returned pose never has a larger cost over the
    given correspondences than the input pose.
    """
    pts = np.asarray(points3d, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.float64)

    def cost(p):
        errs = reprojection_errors(p, intrinsics, pts, px)
        if not np.isfinite(errs).all():
            return np.inf
        return float(np.sum(errs * errs))

    current = pose
    current_cost = cost(pose)
    for _ in range(max_iterations):
        res, J = _residuals_and_jacobian(current, intrinsics, pts, px)
        if res is None:
            break
        JtJ = J.T @ J
        g = J.T @ res
        try:
            step = np.linalg.solve(JtJ, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(JtJ + 1e-10 * np.eye(6), -g)
        accepted = False
        for _ in range(20):
            R_new = _rodrigues(step[:3]) @ current.rotation
            Ur, _, Vtr = np.linalg.svd(R_new)
            trial = CameraPose(Ur @ Vtr, current.translation + step[3:])
            trial_cost = cost(trial)
            if trial_cost < current_cost:
                current, current_cost = trial, trial_cost
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            break
        if float(np.linalg.norm(step)) < step_tolerance:
            break
    return current


def _adaptive_iterations(inlier_ratio, confidence, sample_size=4):
    if inlier_ratio <= 0.0:
        return None
    w = min(inlier_ratio, 1.0) ** sample_size
    if w >= 1.0:
        return 1
    denom = math.log(1.0 - w)
    if denom >= 0.0:
        return None
    return max(1, int(math.ceil(math.log(max(1.0 - confidence, 1e-300)) / denom)))


def ransac_pnp(
    points3d,
    pixels,
    intrinsics: CameraIntrinsics,
    inlier_threshold_px: float = 8.0,
    max_iterations: int = 10_000,
    confidence: float = 0.9999,
    min_inliers: int = 12,
    seed: int = 0,
    refine_iterations: int = 20,
) -> LocalizationResult:
    """Robust pose from correspondences via P3P hypotheses and consensus.

    The iteration budget adapts to the best inlier ratio seen so far.  The
    best model is refined over its inliers and the final inlier set is
    recomputed under the refined pose.  Deterministic under ``seed``.
    """
    pts = np.asarray(points3d, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.float64)
    n = pts.shape[0]
    if n < 4:
        return LocalizationResult(None, frozenset(), 0, "insufficient_matches")

    rng = np.random.default_rng(seed)
    best_pose = None
    best_count = 0
    best_mean_err = np.inf
    needed = max_iterations
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        try:
            pose = minimal_pnp(pts[sample], px[sample], intrinsics)
        except DegenerateGeometryError:
            continue
        errs = reprojection_errors(pose, intrinsics, pts, px)
        mask = errs <= inlier_threshold_px
        count = int(mask.sum())
        if count == 0:
            continue
        mean_err = float(errs[mask].mean())
        if count > best_count or (count == best_count and mean_err < best_mean_err):
            best_pose, best_count, best_mean_err = pose, count, mean_err
            adaptive = _adaptive_iterations(count / n, confidence)
            if adaptive is not None:
                needed = min(needed, adaptive)

    if best_pose is None or best_count < min_inliers:
        return LocalizationResult(None, frozenset(), it, "ransac_failed")

    inlier_mask = reprojection_errors(best_pose, intrinsics, pts, px) <= inlier_threshold_px
    refined = refine_pose(
        best_pose, intrinsics, pts[inlier_mask], px[inlier_mask],
        max_iterations=refine_iterations,
    )
    final_mask = reprojection_errors(refined, intrinsics, pts, px) <= inlier_threshold_px
    if not final_mask.any():
        final_mask = inlier_mask
    return LocalizationResult(
        refined,
        frozenset(int(i) for i in np.flatnonzero(final_mask)),
        it,
        "ok",
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def pose_error(estimated: CameraPose, ground_truth: CameraPose) -> tuple[float, float]:
    """(translation error in meters, rotation error in degrees).

    Translation error is the distance between camera centers; rotation error
    is the angle of the relative rotation, arccos((trace - 1) / 2).  The
    angle is evaluated through the relative quaternion: acos itself cannot
    resolve below ~1.2e-6 degrees in float64, which would mask the accuracy
    of near-exact estimates.
    """
    trans = float(np.linalg.norm(estimated.camera_center() - ground_truth.camera_center()))
    q = rotation_to_quaternion(ground_truth.rotation.T @ estimated.rotation)
    rot = math.degrees(2.0 * math.atan2(float(np.linalg.norm(q[1:])), float(q[0])))
    return trans, rot


def recall_at_thresholds(results, ground_truths, threshold_pairs) -> list[float]:
    """Percentage of queries within each (meters, degrees) threshold pair.

    ``results`` and ``ground_truths`` map query id to LocalizationResult and
    CameraPose; the id sets must match exactly.  Queries without a pose
    count as failures at every threshold.
    """
    res_ids = set(results)
    gt_ids = set(ground_truths)
    if res_ids != gt_ids:
        missing = sorted(res_ids ^ gt_ids)
        raise ValueError(f"result and ground-truth ids differ: {missing[:10]}")
    if not results:
        raise ValueError("no queries to evaluate")

    errors = []
    for qid, result in results.items():
        if result.pose is None:
            errors.append((np.inf, np.inf))
        else:
            errors.append(pose_error(result.pose, ground_truths[qid]))
    out = []
    for t_m, r_deg in threshold_pairs:
        hits = sum(1 for te, re in errors if te <= t_m and re <= r_deg)
        out.append(100.0 * hits / len(errors))
    return out


# ---------------------------------------------------------------------------
# Quaternion helpers (result file pose encoding)
# ---------------------------------------------------------------------------

def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with canonical nonnegative w."""
    R = np.asarray(R, dtype=np.float64)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = np.array([
            0.25 * s,
            (R[2, 1] - R[1, 2]) / s,
            (R[0, 2] - R[2, 0]) / s,
            (R[1, 0] - R[0, 1]) / s,
        ])
    else:
        i = int(np.argmax([R[0, 0], R[1, 1], R[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
