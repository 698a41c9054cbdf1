"""Pose recovery from weighted 2D-3D correspondences.

Pipeline: a direct linear transform (DLT) initialization with the rotation
projected onto SO(3) by orthogonal Procrustes, RANSAC over 6-point minimal
samples to reject outlier detections, and confidence-weighted
Levenberg-Marquardt refinement on the 6-dof tangent parameterization
(axis-angle increment composed onto the quaternion, additive translation).

RANSAC consensus counting is unweighted; detection confidences d_i enter the
refinement stage only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    BEHIND_PENALTY_DIAGONALS,
    Z_MIN,
    CameraIntrinsics,
    KeypointSet3D,
    Pose,
    correspondence_arrays,
    quat_from_axis_angle,
    quat_multiply,
    residual_norms,
    weighted_rms_pixels,
)

# DLT needs 11 constraints; at 2 per correspondence that means 6 points.
MIN_DLT_POINTS = 6

# Relative singular-value floor below which the DLT system counts as
# rank-deficient (collinear or coplanar points).
DEGENERACY_RTOL = 1e-9

LM_INITIAL_LAMBDA = 1e-3
LM_MAX_ESCALATIONS = 10


class PoseEstimationError(RuntimeError):
    """Base class for solver failures."""


class InsufficientCorrespondences(PoseEstimationError):
    pass


class DegenerateConfiguration(PoseEstimationError):
    pass


class NoConsensus(PoseEstimationError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 500
    inlier_threshold: float = 4.0  # pixels
    min_sample_size: int = 4  # clamped to MIN_DLT_POINTS by this solver
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self) -> None:
        if self.inlier_threshold <= 0.0:
            raise ValueError("inlier threshold must be positive")
        if self.min_sample_size < 4:
            raise ValueError("minimal sample size must be at least 4")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("need at least one iteration")


@dataclass(frozen=True)
class RefineResult:
    pose: Pose
    cost: float  # sum of w_i * ||residual_i||^2 at the returned pose
    iterations: int
    diverged: bool


@dataclass(frozen=True)
class PnPResult:
    pose: Pose
    inlier_indices: np.ndarray  # indices into the input correspondence sequence
    inlier_semantic_ids: frozenset[int]
    error: float  # weighted RMS reprojection error over the inliers, pixels
    ransac_iterations: int
    refine_iterations: int


# ---------------------------------------------------------------------------
# Linear initialization
# ---------------------------------------------------------------------------

def _normalization_2d(points: np.ndarray) -> np.ndarray:
    centroid = points.mean(axis=0)
    spread = np.linalg.norm(points - centroid, axis=1).mean()
    scale = math.sqrt(2.0) / spread if spread > 0 else 1.0
    return np.array(
        [[scale, 0.0, -scale * centroid[0]], [0.0, scale, -scale * centroid[1]], [0.0, 0.0, 1.0]]
    )


def _normalization_3d(points: np.ndarray) -> np.ndarray:
    centroid = points.mean(axis=0)
    spread = np.linalg.norm(points - centroid, axis=1).mean()
    scale = math.sqrt(3.0) / spread if spread > 0 else 1.0
    t = np.eye(4)
    t[:3, :3] *= scale
    t[:3, 3] = -scale * centroid
    return t


def _dlt(points3d: np.ndarray, points2d: np.ndarray, camera: CameraIntrinsics) -> Pose:
    n = len(points3d)
    if n < MIN_DLT_POINTS:
        raise InsufficientCorrespondences(f"DLT needs >= {MIN_DLT_POINTS} points, got {n}")

    # Work in normalized image coordinates, then Hartley-normalize both sides.
    xn = np.column_stack(
        [(points2d[:, 0] - camera.cx) / camera.fx, (points2d[:, 1] - camera.cy) / camera.fy]
    )
    t2 = _normalization_2d(xn)
    t3 = _normalization_3d(points3d)
    xh = np.column_stack([xn, np.ones(n)]) @ t2.T
    wh = np.column_stack([points3d, np.ones(n)]) @ t3.T

    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = wh
    a[0::2, 8:12] = -xh[:, [0]] * wh
    a[1::2, 4:8] = wh
    a[1::2, 8:12] = -xh[:, [1]] * wh

    _, s, vt = np.linalg.svd(a)
    if s[10] <= DEGENERACY_RTOL * s[0]:
        raise DegenerateConfiguration("rank-deficient DLT system (collinear or coplanar points)")
    p = vt[-1].reshape(3, 4)
    p = np.linalg.inv(t2) @ p @ t3

    # Cheirality: the third row times a point gives (scaled) depth, which must
    # be positive on average for the points actually observed.
    homogeneous = np.column_stack([points3d, np.ones(n)])
    if float(np.mean(homogeneous @ p[2])) < 0.0:
        p = -p

    u, sv, vt_r = np.linalg.svd(p[:, :3])
    scale = sv.mean()
    if scale <= 0.0:
        raise DegenerateConfiguration("vanishing rotation block in DLT solution")
    rot = u @ np.diag([1.0, 1.0, float(np.linalg.det(u @ vt_r))]) @ vt_r
    translation = p[:, 3] / scale
    return Pose.from_rt(rot, translation)


def solve_pnp_linear(correspondences, camera: CameraIntrinsics) -> Pose:
    """DLT pose from at least 6 non-degenerate correspondences."""
    _, p3, p2, _ = correspondence_arrays(correspondences)
    return _dlt(p3, p2, camera)


def _planar_pose(points3d: np.ndarray, points2d: np.ndarray, camera: CameraIntrinsics) -> Pose:
    """Pose for coplanar points via plane-to-image homography decomposition.

    Parts lying flat expose a single face whose keypoints are coplanar; the
    12-dof DLT is rank-deficient there, but the homography from plane
    coordinates to normalized image coordinates still determines the pose.
    """
    n = len(points3d)
    if n < 4:
        raise InsufficientCorrespondences("planar pose needs at least 4 points")

    centroid = points3d.mean(axis=0)
    centered = points3d - centroid
    _, _, vt = np.linalg.svd(centered)
    frame = vt.T  # columns: two in-plane axes, then the plane normal
    if np.linalg.det(frame) < 0:
        frame[:, 2] = -frame[:, 2]
    plane_xy = centered @ frame[:, :2]

    xn = np.column_stack(
        [(points2d[:, 0] - camera.cx) / camera.fx, (points2d[:, 1] - camera.cy) / camera.fy]
    )
    t2 = _normalization_2d(xn)
    tp = _normalization_2d(plane_xy)
    xh = np.column_stack([xn, np.ones(n)]) @ t2.T
    ph = np.column_stack([plane_xy, np.ones(n)]) @ tp.T

    a = np.zeros((2 * n, 9))
    a[0::2, 0:3] = ph
    a[0::2, 6:9] = -xh[:, [0]] * ph
    a[1::2, 3:6] = ph
    a[1::2, 6:9] = -xh[:, [1]] * ph
    _, s, vt_h = np.linalg.svd(a)
    if s[7] <= DEGENERACY_RTOL * s[0]:
        raise DegenerateConfiguration("rank-deficient homography system (collinear points)")
    h = np.linalg.inv(t2) @ vt_h[-1].reshape(3, 3) @ tp

    scale = 2.0 / (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    best: Pose | None = None
    best_depth = -math.inf
    for sign in (scale, -scale):
        r1, r2 = sign * h[:, 0], sign * h[:, 1]
        r3 = np.cross(r1, r2)
        u, _, vt_r = np.linalg.svd(np.column_stack([r1, r2, r3]))
        rot_plane = u @ np.diag([1.0, 1.0, float(np.linalg.det(u @ vt_r))]) @ vt_r
        t = sign * h[:, 2]
        rot = rot_plane @ frame.T
        translation = t - rot @ centroid
        depth = float(np.mean(points3d @ rot[2] + translation[2]))
        if depth > best_depth:
            best_depth = depth
            best = Pose.from_rt(rot, translation)
    if best is None or best_depth <= 0.0:
        raise DegenerateConfiguration("planar decomposition places points behind the camera")
    return best


def _linear_or_planar(points3d: np.ndarray, points2d: np.ndarray, camera: CameraIntrinsics) -> Pose:
    """DLT with a planar-homography fallback for coplanar point sets."""
    try:
        return _dlt(points3d, points2d, camera)
    except DegenerateConfiguration:
        return _planar_pose(points3d, points2d, camera)


# ---------------------------------------------------------------------------
# Nonlinear refinement
# ---------------------------------------------------------------------------

def _residuals(
    camera: CameraIntrinsics, pose: Pose, p3: np.ndarray, p2: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-point 2-vector residuals plus the quantities the Jacobian reuses."""
    rot = pose.rotation_matrix()
    rotated = p3 @ rot.T
    cam = rotated + pose.t
    z = cam[:, 2]
    ok = z > Z_MIN

    res = np.zeros((len(p3), 2))
    penalty = BEHIND_PENALTY_DIAGONALS * camera.image_diagonal
    res[~ok] = (penalty, 0.0)
    zf = np.where(ok, z, 1.0)
    u = camera.fx * cam[:, 0] / zf + camera.cx
    v = camera.fy * cam[:, 1] / zf + camera.cy
    res[ok, 0] = u[ok] - p2[ok, 0]
    res[ok, 1] = v[ok] - p2[ok, 1]
    return res, rotated, cam


def _jacobian(
    camera: CameraIntrinsics, rotated: np.ndarray, cam: np.ndarray
) -> np.ndarray:
    """d(residual)/d[omega, dt] per point; zero rows for behind-camera points."""
    n = len(cam)
    jac = np.zeros((n, 2, 6))
    z = cam[:, 2]
    ok = z > Z_MIN
    if not ok.any():
        return jac

    x, y, zz = cam[ok, 0], cam[ok, 1], cam[ok, 2]
    j_proj = np.zeros((ok.sum(), 2, 3))
    j_proj[:, 0, 0] = camera.fx / zz
    j_proj[:, 0, 2] = -camera.fx * x / zz**2
    j_proj[:, 1, 1] = camera.fy / zz
    j_proj[:, 1, 2] = -camera.fy * y / zz**2

    # Left rotation perturbation: d(cam)/d(omega) = -[rotated]_x.
    ra, rb, rc = rotated[ok, 0], rotated[ok, 1], rotated[ok, 2]
    d_omega = np.zeros((ok.sum(), 3, 3))
    d_omega[:, 0, 1] = rc
    d_omega[:, 0, 2] = -rb
    d_omega[:, 1, 0] = -rc
    d_omega[:, 1, 2] = ra
    d_omega[:, 2, 0] = rb
    d_omega[:, 2, 1] = -ra

    jac[ok, :, 0:3] = np.einsum("nij,njk->nik", j_proj, d_omega)
    jac[ok, :, 3:6] = j_proj
    return jac


def _apply_step(pose: Pose, delta: np.ndarray) -> Pose:
    quat = quat_multiply(quat_from_axis_angle(delta[:3]), pose.quat)
    return Pose(quat, pose.t + delta[3:])


def refine_pose(
    camera: CameraIntrinsics,
    initial: Pose,
    correspondences,
    max_iterations: int = 100,
    tolerance: float = 1e-10,
) -> RefineResult:
    """Levenberg-Marquardt minimization of sum(d_i * ||proj(p_i) - u_i||^2).

    Only cost-decreasing steps are accepted, so the returned cost never
    exceeds the initial cost. Ten consecutive damping escalations flag
    divergence and return the best pose seen.
    """
    _, p3, p2, w = correspondence_arrays(correspondences)
    if len(p3) == 0:
        raise InsufficientCorrespondences("no correspondences to refine against")
    return _refine_arrays(camera, initial, p3, p2, w, max_iterations, tolerance)


def _refine_arrays(
    camera: CameraIntrinsics,
    initial: Pose,
    p3: np.ndarray,
    p2: np.ndarray,
    w: np.ndarray,
    max_iterations: int = 100,
    tolerance: float = 1e-10,
) -> RefineResult:
    weights = np.repeat(w, 2)

    pose = initial
    res, rotated, cam = _residuals(camera, pose, p3, p2)
    cost = float(np.dot(weights, res.reshape(-1) ** 2))
    lam = LM_INITIAL_LAMBDA
    escalations = 0
    diverged = False
    iterations = 0

    for _ in range(max_iterations):
        iterations += 1
        jac = _jacobian(camera, rotated, cam).reshape(-1, 6)
        flat = res.reshape(-1)
        jtw = jac.T * weights
        normal = jtw @ jac
        gradient = jtw @ flat

        while True:
            damped = normal + lam * np.diag(np.diag(normal))
            try:
                delta = np.linalg.solve(damped, -gradient)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and float(np.linalg.norm(delta)) < tolerance:
                return RefineResult(pose, cost, iterations, diverged)
            if delta is not None:
                candidate = _apply_step(pose, delta)
                new_res, new_rot, new_cam = _residuals(camera, candidate, p3, p2)
                new_cost = float(np.dot(weights, new_res.reshape(-1) ** 2))
                if new_cost < cost:
                    pose, cost = candidate, new_cost
                    res, rotated, cam = new_res, new_rot, new_cam
                    lam = max(lam / 10.0, 1e-12)
                    escalations = 0
                    break
            lam *= 10.0
            escalations += 1
            if escalations >= LM_MAX_ESCALATIONS:
                return RefineResult(pose, cost, iterations, True)

    return RefineResult(pose, cost, iterations, diverged)


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------

def _polish_consensus(
    camera: CameraIntrinsics,
    p3: np.ndarray,
    p2: np.ndarray,
    model: Pose,
    mask: np.ndarray,
    count: int,
    threshold: float,
    max_rounds: int = 10,
) -> tuple[Pose, np.ndarray, int]:
    """Grow a consensus set by refitting on it until the count stops rising.

    Rounds run at an annealed capture threshold (3x down to 1x the inlier
    threshold) so a roughly-right hypothesis first grabs broad support, then
    tightens onto the final consensus. Each round re-initializes by DLT where
    possible (coplanar support sets leave the calibrated 6-dof problem
    well-posed, so they skip straight to LM) and polishes with a short
    unit-weight LM. The returned consensus is always at the 1x threshold.
    """
    best = (model, mask, count)
    current = model
    schedule = [3.0, 2.0, 1.5] + [1.0] * max_rounds
    prev_count = -1
    for factor in schedule:
        support = residual_norms(camera, current, p3, p2) < factor * threshold
        n_support = int(support.sum())
        if n_support < MIN_DLT_POINTS:
            break
        try:
            seed = _linear_or_planar(p3[support], p2[support], camera)
        except PoseEstimationError:
            seed = current
        current = _refine_arrays(
            camera, seed, p3[support], p2[support], np.ones(n_support), max_iterations=15
        ).pose
        final_mask = residual_norms(camera, current, p3, p2) < threshold
        final_count = int(final_mask.sum())
        if final_count > best[2]:
            best = (current, final_mask, final_count)
        if factor == 1.0:
            if final_count <= prev_count:
                break
            prev_count = final_count
    return best


def _adaptive_bound(inlier_ratio: float, sample_size: int, confidence: float) -> int:
    """Iterations needed to hit an all-inlier sample at the given confidence."""
    good = inlier_ratio**sample_size
    if good >= 1.0 - 1e-12:
        return 0
    if good <= 0.0:
        return np.iinfo(np.int64).max
    needed = math.log(1.0 - confidence) / math.log1p(-good)
    return int(min(math.ceil(needed), np.iinfo(np.int64).max))


def solve_pnp_ransac(
    correspondences, camera: CameraIntrinsics, config: RansacConfig
) -> PnPResult:
    """Hypothesize-and-verify pose fit with confidence-weighted refinement.

    Minimal 6-point samples seed DLT hypotheses; the consensus test is the
    plain (unweighted) pixel-residual threshold; the best consensus set is
    re-initialized by DLT and polished by weighted LM. The reported inlier
    set is the threshold test re-evaluated on the refined pose.
    """
    ids, p3, p2, w = correspondence_arrays(correspondences)
    n = len(p3)
    sample_size = max(MIN_DLT_POINTS, config.min_sample_size)
    if n < sample_size:
        raise InsufficientCorrespondences(f"need >= {sample_size} correspondences, got {n}")

    rng = np.random.default_rng(config.seed)
    best_mask: np.ndarray | None = None
    best_model: Pose | None = None
    best_count = 0
    required = config.max_iterations
    polish_budget = 25

    # Deterministic opening hypothesis: DLT over everything. With few or no
    # gross outliers this lands at the least-squares pose immediately, which
    # both fixes the answer and collapses the adaptive iteration bound.
    try:
        opening = _linear_or_planar(p3, p2, camera)
        mask = residual_norms(camera, opening, p3, p2) < config.inlier_threshold
        count = int(mask.sum())
        if count >= MIN_DLT_POINTS:
            opening, mask, count = _polish_consensus(
                camera, p3, p2, opening, mask, count, config.inlier_threshold
            )
        if count >= MIN_DLT_POINTS:
            best_count, best_mask, best_model = count, mask, opening
            required = min(required, _adaptive_bound(count / n, sample_size, config.confidence))
    except PoseEstimationError:
        pass

    iteration = 0
    best_raw = 0
    while iteration < min(required, config.max_iterations):
        iteration += 1
        sample = rng.choice(n, size=sample_size, replace=False)
        try:
            hypothesis = _linear_or_planar(p3[sample], p2[sample], camera)
        except PoseEstimationError:
            continue
        # The sample DLT fits 11 parameters to 12 equations and soaks up the
        # noise; re-solving the same sample as a rigid 6-dof problem is what
        # makes the hypothesis land near a true basin.
        hypothesis = _refine_arrays(
            camera, hypothesis, p3[sample], p2[sample], np.ones(sample_size), max_iterations=15
        ).pose
        mask = residual_norms(camera, hypothesis, p3, p2) < config.inlier_threshold
        count = int(mask.sum())
        # Local optimization: a minimal-sample DLT is noise-fragile, so any
        # sample that sets a new raw-consensus record gets its consensus
        # refit and regrown. Raw counts compete only with raw counts, so a
        # lucky polished score can never lock later hypotheses out.
        if count > best_raw:
            best_raw = count
            if count >= MIN_DLT_POINTS and polish_budget > 0:
                polish_budget -= 1
                hypothesis, mask, count = _polish_consensus(
                    camera, p3, p2, hypothesis, mask, count, config.inlier_threshold
                )
        if count > best_count:
            best_count, best_mask, best_model = count, mask, hypothesis
            required = min(required, _adaptive_bound(count / n, sample_size, config.confidence))

    if best_mask is None or best_count < MIN_DLT_POINTS:
        raise NoConsensus(f"no hypothesis reached {MIN_DLT_POINTS} inliers in {iteration} iterations")

    consensus = np.nonzero(best_mask)[0]
    refined = _refine_arrays(camera, best_model, p3[consensus], p2[consensus], w[consensus])

    final_mask = residual_norms(camera, refined.pose, p3, p2) < config.inlier_threshold
    inliers = np.nonzero(final_mask)[0]
    if inliers.size == 0:
        raise NoConsensus("refined pose lost all inliers")
    error = weighted_rms_pixels(camera, refined.pose, p3[inliers], p2[inliers], w[inliers])
    return PnPResult(
        pose=refined.pose,
        inlier_indices=inliers,
        inlier_semantic_ids=frozenset(int(i) for i in ids[inliers]),
        error=error,
        ransac_iterations=iteration,
        refine_iterations=refined.iterations,
    )


def solve_with_edge_subset(
    correspondences,
    keypoints: KeypointSet3D,
    excluded_edge_ids,
    camera: CameraIntrinsics,
    config: RansacConfig,
) -> PnPResult:
    """RANSAC solve after dropping correspondences on unreliable edges.

    Lets callers fall back to the remaining numbered edges when one edge's
    detections are untrustworthy (for example a glare-washed edge).
    """
    excluded = set(int(e) for e in excluded_edge_ids)
    kept = [
        c for c in correspondences if int(keypoints.edge_ids[c.semantic_id]) not in excluded
    ]
    if len(kept) < MIN_DLT_POINTS:
        raise InsufficientCorrespondences(
            f"only {len(kept)} correspondences remain after edge exclusion"
        )
    return solve_pnp_ransac(kept, camera, config)
