"""Shared builders and independent reference implementations for the tests.

The reference implementations here deliberately avoid the library's own code
paths: scalar full-frame rasterization, scipy-based hole filling and rotation
metrics, direct per-pixel depth competition. Tests compare the package
against these, never against itself.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from partpose import CameraIntrinsics, Correspondence, Pose
from partpose.geometry import random_rotation
from partpose.mesh import TriangleMesh

Z_MIN = 1e-6


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def random_pose(rng: np.random.Generator, depth: tuple[float, float] = (0.5, 0.8)) -> Pose:
    t = np.array(
        [rng.uniform(-0.1, 0.1), rng.uniform(-0.08, 0.08), rng.uniform(*depth)]
    )
    return Pose(random_rotation(rng), t)


def random_model_points(rng: np.random.Generator, n: int, extent: float = 0.05) -> np.ndarray:
    return rng.uniform(-extent, extent, size=(n, 3))


def exact_correspondences(
    camera: CameraIntrinsics, pose: Pose, points3d: np.ndarray, weights=None
) -> list[Correspondence]:
    from partpose import project_points

    uv, z = project_points(camera, pose, points3d)
    assert (z > Z_MIN).all(), "builder expects points in front of the camera"
    if weights is None:
        weights = np.ones(len(points3d))
    return [
        Correspondence(i, points3d[i], uv[i], float(weights[i]))
        for i in range(len(points3d))
    ]


def random_triangle_mesh(
    rng: np.random.Generator, n_triangles: int, center_z: float = 2.0
) -> TriangleMesh:
    vertices = rng.uniform(-0.5, 0.5, size=(3 * n_triangles, 3))
    vertices[:, 2] += center_z
    triangles = np.arange(3 * n_triangles).reshape(n_triangles, 3)
    return TriangleMesh(vertices, triangles)


# ---------------------------------------------------------------------------
# Reference implementations
# ---------------------------------------------------------------------------

def rms_reference(offsets: np.ndarray, weights: np.ndarray) -> float:
    """Direct recomputation of the weighted RMS from per-point pixel offsets."""
    sq = (np.asarray(offsets) ** 2).sum(axis=1)
    w = np.asarray(weights, dtype=float)
    return math.sqrt(float((w * sq).sum() / w.sum()))


def pose_matrix(pose: Pose) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = Rotation.from_quat(pose.quat[[1, 2, 3, 0]]).as_matrix()
    m[:3, 3] = pose.t
    return m


def rotation_angle_reference(pose_a: Pose, pose_b: Pose) -> float:
    ra = Rotation.from_quat(pose_a.quat[[1, 2, 3, 0]])
    rb = Rotation.from_quat(pose_b.quat[[1, 2, 3, 0]])
    return math.degrees((ra.inv() * rb).magnitude())


def fill_reference(coverage: np.ndarray) -> np.ndarray:
    """External-contour fill via scipy's hole filling (4-connected background)."""
    return ndimage.binary_fill_holes(np.asarray(coverage, dtype=bool))


def _edge(ax, ay, bx, by, px, py) -> float:
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _tie_accepts(ax, ay, bx, by) -> bool:
    dy = by - ay
    return (dy == 0.0 and bx - ax > 0.0) or dy < 0.0


def rasterize_reference(
    mesh: TriangleMesh, pose: Pose, camera: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force full-frame point-in-triangle rasterization with z-sort.

    Scalar loops over every pixel center for every triangle; depth by
    perspective-correct interpolation of 1/z.
    """
    h, w = camera.height, camera.width
    coverage = np.zeros((h, w), dtype=bool)
    depth = np.full((h, w), np.inf)
    cam_pts = pose.transform(mesh.vertices)

    for tri in mesh.triangles:
        pts = cam_pts[tri]
        if any(p[2] <= Z_MIN for p in pts):
            continue
        screen = [
            (
                camera.fx * p[0] / p[2] + camera.cx,
                camera.fy * p[1] / p[2] + camera.cy,
                p[2],
            )
            for p in pts
        ]
        area2 = _edge(screen[0][0], screen[0][1], screen[1][0], screen[1][1], screen[2][0], screen[2][1])
        if area2 == 0.0:
            continue
        if area2 < 0.0:
            screen = [screen[0], screen[2], screen[1]]
            area2 = -area2
        (x0, y0, z0), (x1, y1, z1), (x2, y2, z2) = screen
        for iy in range(h):
            py = iy + 0.5
            for ix in range(w):
                px = ix + 0.5
                w0 = _edge(x1, y1, x2, y2, px, py)
                w1 = _edge(x2, y2, x0, y0, px, py)
                w2 = _edge(x0, y0, x1, y1, px, py)
                if not _covers(w0, x1, y1, x2, y2):
                    continue
                if not _covers(w1, x2, y2, x0, y0):
                    continue
                if not _covers(w2, x0, y0, x1, y1):
                    continue
                inv_z = (w0 / area2) / z0 + (w1 / area2) / z1 + (w2 / area2) / z2
                z_pix = 1.0 / inv_z
                coverage[iy, ix] = True
                if z_pix < depth[iy, ix]:
                    depth[iy, ix] = z_pix
    return coverage, depth


def _covers(wk: float, ax: float, ay: float, bx: float, by: float) -> bool:
    if wk > 0.0:
        return True
    return wk == 0.0 and _tie_accepts(ax, ay, bx, by)


def index_mask_reference(
    masks: list[np.ndarray], depths: list[np.ndarray], hole_depth: float = 1e30
) -> np.ndarray:
    """Per-pixel depth competition with hole-pixel and instance-id tiebreaks."""
    h, w = masks[0].shape
    labels = np.zeros((h, w), dtype=np.uint16)
    for iy in range(h):
        for ix in range(w):
            best_depth = math.inf
            best_id = 0
            for k, (mask, depth) in enumerate(zip(masks, depths)):
                if not mask[iy, ix]:
                    continue
                d = depth[iy, ix] if math.isfinite(depth[iy, ix]) else hole_depth
                if d < best_depth:
                    best_depth = d
                    best_id = k + 1
            labels[iy, ix] = best_id
    return labels


def evaluation_reference(
    estimated: Pose, truth: Pose, points3d: np.ndarray, camera: CameraIntrinsics
) -> tuple[float, float, float]:
    """Second implementation of the per-instance pose metrics."""
    rot_deg = rotation_angle_reference(estimated, truth)
    trans_m = float(np.linalg.norm(np.asarray(estimated.t) - np.asarray(truth.t)))

    def proj(pose: Pose) -> np.ndarray:
        cam = points3d @ pose_matrix(pose)[:3, :3].T + pose.t
        return np.column_stack(
            [
                camera.fx * cam[:, 0] / cam[:, 2] + camera.cx,
                camera.fy * cam[:, 1] / cam[:, 2] + camera.cy,
            ]
        )

    diff = proj(estimated) - proj(truth)
    reproj = float(np.linalg.norm(diff, axis=1).mean())
    return rot_deg, trans_m, reproj
