"""Rigid transforms, pinhole projection, and reprojection error.

Conventions
-----------
- Poses map model-frame points into the camera frame: ``x_cam = R @ x_model + t``.
- Quaternions are unit, ordered ``(w, x, y, z)``, stored with a canonical sign
  (first nonzero component positive) so equal rotations compare equal.
- The camera looks down +Z; pixel ``(ix, iy)`` covers the unit square whose
  center is ``(ix + 0.5, iy + 0.5)``. A 3D point is in front of the camera when
  its depth exceeds ``Z_MIN``.
- All units are meters and pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Depth below which a point counts as behind the camera (meters).
Z_MIN = 1e-6

# Behind-camera correspondences contribute this many image diagonals of
# pixel error, which keeps candidate ranking total without infinities.
BEHIND_PENALTY_DIAGONALS = 10.0


def _as_float_array(value, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Quaternion helpers (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = float(np.linalg.norm(q))
    if norm < 1e-12:
        raise ValueError("cannot normalize near-zero quaternion")
    q = q / norm
    # Canonical sign: first nonzero component positive.
    for component in q:
        if component != 0.0:
            if component < 0.0:
                q = -q
            break
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion via the Shepperd branch selection."""
    m = np.asarray(m, dtype=np.float64)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_from_axis_angle(axis_angle: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (radians) to unit quaternion."""
    v = np.asarray(axis_angle, dtype=np.float64)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        return quat_normalize(np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]]))
    half = 0.5 * angle
    s = math.sin(half) / angle
    return quat_normalize(np.array([math.cos(half), v[0] * s, v[1] * s, v[2] * s]))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Quaternion drawn uniformly from SO(3) (normalized 4D Gaussian)."""
    return quat_normalize(rng.normal(size=4))


def rotation_angle_deg(qa: np.ndarray, qb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    dot = abs(float(np.dot(qa, qb)))
    return math.degrees(2.0 * math.acos(min(1.0, dot)))


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform from model frame to camera frame."""

    quat: np.ndarray  # (4,) unit quaternion, wxyz
    t: np.ndarray  # (3,) translation, meters

    def __post_init__(self) -> None:
        q = quat_normalize(_as_float_array(self.quat, (4,), "quat"))
        t = _as_float_array(self.t, (3,), "t").copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_rt(rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        return Pose(quat_from_matrix(rotation), translation)

    @staticmethod
    def from_matrix(matrix: np.ndarray) -> "Pose":
        m = _as_float_array(matrix, (4, 4), "matrix")
        return Pose.from_rt(m[:3, :3], m[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self ∘ other)(x) = self(other(x))."""
        q = quat_multiply(self.quat, other.quat)
        t = self.rotation_matrix() @ other.t + self.t
        return Pose(q, t)

    def inverse(self) -> "Pose":
        q_inv = quat_conjugate(self.quat)
        r_inv = quat_to_matrix(q_inv)
        return Pose(q_inv, -(r_inv @ self.t))

    def transform(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.t


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def transform(p: Pose, points: np.ndarray) -> np.ndarray:
    return p.transform(points)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Distortion-free pinhole model."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width):
            raise ValueError("cx must lie inside [0, width)")
        if not (0 <= self.cy < self.height):
            raise ValueError("cy must lie inside [0, height)")

    @property
    def image_diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, uv: np.ndarray) -> np.ndarray:
        """Elementwise test that pixel coordinates fall inside the image."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        return (
            (uv[:, 0] >= 0.0)
            & (uv[:, 0] < self.width)
            & (uv[:, 1] >= 0.0)
            & (uv[:, 1] < self.height)
        )


@dataclass(frozen=True)
class KeypointSet3D:
    """Model-frame keypoints sampled along the part's numbered edges."""

    semantic_ids: np.ndarray  # (N,) int, unique and contiguous from 0
    edge_ids: np.ndarray  # (N,) int, edge segment the point sits on
    positions: np.ndarray  # (N, 3) model frame, meters

    def __post_init__(self) -> None:
        sid = np.asarray(self.semantic_ids, dtype=np.int64)
        eid = np.asarray(self.edge_ids, dtype=np.int64)
        pos = np.asarray(self.positions, dtype=np.float64)
        if sid.ndim != 1 or eid.shape != sid.shape or pos.shape != (sid.size, 3):
            raise ValueError("inconsistent keypoint array shapes")
        if not np.array_equal(np.sort(sid), np.arange(sid.size)):
            raise ValueError("semantic ids must be unique and contiguous from 0")
        order = np.argsort(sid)
        sid, eid, pos = sid[order], eid[order], pos[order].copy()
        for arr in (sid, eid, pos):
            arr.flags.writeable = False
        object.__setattr__(self, "semantic_ids", sid)
        object.__setattr__(self, "edge_ids", eid)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return int(self.semantic_ids.size)

    def positions_for(self, semantic_ids: np.ndarray) -> np.ndarray:
        """Positions looked up by semantic id (ids are the row index)."""
        return self.positions[np.asarray(semantic_ids, dtype=np.int64)]

    def edges_for(self, semantic_ids: np.ndarray) -> np.ndarray:
        return self.edge_ids[np.asarray(semantic_ids, dtype=np.int64)]


@dataclass(frozen=True)
class Correspondence:
    """A 3D model point paired with its detected pixel and confidence."""

    semantic_id: int
    point3d: np.ndarray  # (3,) model frame
    point2d: np.ndarray  # (2,) pixels; may fall outside the image
    weight: float = 1.0  # localization confidence d_i

    def __post_init__(self) -> None:
        p3 = _as_float_array(self.point3d, (3,), "point3d").copy()
        p2 = _as_float_array(self.point2d, (2,), "point2d").copy()
        p3.flags.writeable = False
        p2.flags.writeable = False
        object.__setattr__(self, "point3d", p3)
        object.__setattr__(self, "point2d", p2)
        if not (0.0 <= self.weight <= 1.0):
            raise ValueError("weight must lie in [0, 1]")


def correspondence_arrays(
    correspondences,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pack correspondences into (ids, points3d, points2d, weights) arrays."""
    n = len(correspondences)
    ids = np.empty(n, dtype=np.int64)
    p3 = np.empty((n, 3))
    p2 = np.empty((n, 2))
    w = np.empty(n)
    for i, c in enumerate(correspondences):
        ids[i] = c.semantic_id
        p3[i] = c.point3d
        p2[i] = c.point2d
        w[i] = c.weight
    return ids, p3, p2, w


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project_points(
    camera: CameraIntrinsics, pose: Pose, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Project model-frame points.

    Returns ``(uv, z)`` where ``uv`` is (N, 2) pixel coordinates (NaN for
    points at or behind ``Z_MIN``) and ``z`` is the camera-frame depth.
    """
    cam_pts = pose.transform(np.atleast_2d(points))
    z = cam_pts[:, 2]
    in_front = z > Z_MIN
    uv = np.full((cam_pts.shape[0], 2), np.nan)
    zf = np.where(in_front, z, 1.0)
    uv[:, 0] = np.where(in_front, camera.fx * cam_pts[:, 0] / zf + camera.cx, np.nan)
    uv[:, 1] = np.where(in_front, camera.fy * cam_pts[:, 1] / zf + camera.cy, np.nan)
    return uv, z


def project(camera: CameraIntrinsics, pose: Pose, point: np.ndarray) -> np.ndarray | None:
    """Project a single point; ``None`` flags a behind-camera point."""
    uv, z = project_points(camera, pose, np.asarray(point, dtype=np.float64)[None, :])
    if z[0] <= Z_MIN:
        return None
    return uv[0]


def residual_norms(
    camera: CameraIntrinsics, pose: Pose, points3d: np.ndarray, points2d: np.ndarray
) -> np.ndarray:
    """Per-correspondence pixel error; behind-camera points get the fixed penalty."""
    uv, z = project_points(camera, pose, points3d)
    penalty = BEHIND_PENALTY_DIAGONALS * camera.image_diagonal
    norms = np.full(z.shape, penalty)
    ok = z > Z_MIN
    diff = uv[ok] - np.atleast_2d(points2d)[ok]
    norms[ok] = np.hypot(diff[:, 0], diff[:, 1])
    return norms


def weighted_rms_pixels(
    camera: CameraIntrinsics,
    pose: Pose,
    points3d: np.ndarray,
    points2d: np.ndarray,
    weights: np.ndarray,
) -> float:
    """sqrt(sum(w_i * err_i^2) / sum(w_i)) over the given correspondences."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("no correspondences")
    total = float(w.sum())
    if total <= 0.0:
        raise ValueError("total correspondence weight must be positive")
    norms = residual_norms(camera, pose, points3d, points2d)
    return float(math.sqrt(float(np.dot(w, norms ** 2)) / total))


def reprojection_error(camera: CameraIntrinsics, pose: Pose, correspondences) -> float:
    """Confidence-weighted RMS pixel error of a pose against detections."""
    if len(correspondences) == 0:
        raise ValueError("no correspondences")
    _, p3, p2, w = correspondence_arrays(correspondences)
    return weighted_rms_pixels(camera, pose, p3, p2, w)
