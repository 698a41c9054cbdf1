"""Software rasterization for geometry-exact annotation.

Produces the labels a learning pipeline would train on: per-instance masks
via silhouette + external-contour fill, index images resolved by depth,
keypoint visibility from a z-buffer, and Gaussian target heatmaps. No
shading, no anti-aliasing; masks are exact pixel sets.

Sampling convention: a pixel (ix, iy) is covered when the triangle contains
its center (ix + 0.5, iy + 0.5); ties on edges follow the top-left fill rule
so shared edges never double-cover or leave gaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Z_MIN, CameraIntrinsics, KeypointSet3D, Pose, project_points
from .mesh import TriangleMesh

# Depth assigned to filled-hole pixels (mask true, coverage false): loses to
# any real surface, while staying finite so instance-id tiebreaks stay total.
HOLE_DEPTH = 1e30

# Slack for the keypoint-vs-surface depth test (meters); absorbs rasterization
# quantization for points lying exactly on the surface.
DEPTH_EPS = 1e-4


@dataclass(frozen=True)
class DepthBuffer:
    depth: np.ndarray  # (H, W) meters, +inf where empty

    def __post_init__(self) -> None:
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("depth must be a 2D array")
        finite = d[np.isfinite(d)]
        if finite.size and finite.min() <= 0.0:
            raise ValueError("finite depths must be positive")
        d = d.copy()
        d.flags.writeable = False
        object.__setattr__(self, "depth", d)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


@dataclass(frozen=True)
class IndexMask:
    """Per-pixel instance labels; 0 is background, instance k labels as k."""

    labels: np.ndarray  # (H, W) integer

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or not np.issubdtype(lab.dtype, np.integer):
            raise ValueError("labels must be a 2D integer array")
        if lab.size and lab.min() < 0:
            raise ValueError("labels must be non-negative")
        lab = lab.astype(np.uint16)
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids > 0]


@dataclass(frozen=True)
class KeypointScreenState:
    """Projections and visibility flags for every keypoint of one instance."""

    semantic_ids: np.ndarray  # (N,)
    pixels: np.ndarray  # (N, 2) subpixel coordinates, NaN when behind camera
    depths: np.ndarray  # (N,) camera-frame depth
    visible: np.ndarray  # (N,) bool


def _is_top_left(ax: float, ay: float, bx: float, by: float) -> bool:
    # For positively oriented triangles in y-down screen space: a horizontal
    # edge running +x is a top edge, an edge running -y is a left edge.
    dy = by - ay
    return (dy == 0.0 and bx - ax > 0.0) or dy < 0.0


def rasterize(
    mesh: TriangleMesh, pose: Pose, camera: CameraIntrinsics
) -> tuple[np.ndarray, DepthBuffer]:
    """Render the mesh silhouette into a coverage bitmap and a z-buffer.

    Triangles are two-sided (CAD winding is unreliable) and triangles crossing
    the near plane are dropped; scene sampling keeps parts well in front.
    """
    h, w = camera.height, camera.width
    coverage = np.zeros((h, w), dtype=bool)
    depth = np.full((h, w), np.inf)

    cam_pts = pose.transform(mesh.vertices)
    z = cam_pts[:, 2]
    zf = np.where(z > Z_MIN, z, 1.0)
    u = camera.fx * cam_pts[:, 0] / zf + camera.cx
    v = camera.fy * cam_pts[:, 1] / zf + camera.cy

    for tri in mesh.triangles:
        tz = z[tri]
        if np.any(tz <= Z_MIN):
            continue
        tu = u[tri].copy()
        tv = v[tri].copy()
        tz = tz.copy()
        area2 = (tu[1] - tu[0]) * (tv[2] - tv[0]) - (tv[1] - tv[0]) * (tu[2] - tu[0])
        if area2 == 0.0:
            continue
        if area2 < 0.0:
            tu[1], tu[2] = tu[2], tu[1]
            tv[1], tv[2] = tv[2], tv[1]
            tz[1], tz[2] = tz[2], tz[1]
            area2 = -area2

        ix0 = max(0, int(math.ceil(tu.min() - 0.5)))
        ix1 = min(w - 1, int(math.floor(tu.max() - 0.5)))
        iy0 = max(0, int(math.ceil(tv.min() - 0.5)))
        iy1 = min(h - 1, int(math.floor(tv.max() - 0.5)))
        if ix0 > ix1 or iy0 > iy1:
            continue

        px = np.arange(ix0, ix1 + 1) + 0.5
        py = np.arange(iy0, iy1 + 1) + 0.5
        gx, gy = np.meshgrid(px, py)

        inside = np.ones(gx.shape, dtype=bool)
        bary = np.empty((3,) + gx.shape)
        # Edge opposite vertex k runs from vertex (k+1)%3 to (k+2)%3.
        for k in range(3):
            a, b = (k + 1) % 3, (k + 2) % 3
            wk = (tu[b] - tu[a]) * (gy - tv[a]) - (tv[b] - tv[a]) * (gx - tu[a])
            if _is_top_left(tu[a], tv[a], tu[b], tv[b]):
                inside &= (wk > 0.0) | (wk == 0.0)
            else:
                inside &= wk > 0.0
            bary[k] = wk / area2
        if not inside.any():
            continue

        inv_z = bary[0] / tz[0] + bary[1] / tz[1] + bary[2] / tz[2]
        z_pix = np.where(inv_z > 0.0, 1.0 / np.where(inv_z > 0.0, inv_z, 1.0), np.inf)

        sub = depth[iy0 : iy1 + 1, ix0 : ix1 + 1]
        closer = inside & (z_pix < sub)
        sub[closer] = z_pix[closer]
        coverage[iy0 : iy1 + 1, ix0 : ix1 + 1] |= inside

    return coverage, DepthBuffer(depth)


def mask_from_silhouette(coverage: np.ndarray) -> np.ndarray:
    """Fill the silhouette's external contour.

    A pixel belongs to the mask unless it can reach the image border through
    background pixels (4-connectivity), so interior holes get filled.
    """
    cov = np.asarray(coverage, dtype=bool)
    if not cov.any():
        return cov.copy()
    ys, xs = np.nonzero(cov)
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())

    # Work on the padded bounding crop: the 1-px background ring stands in
    # for the rest of the image, which is background-connected to the border.
    sub = np.zeros((y1 - y0 + 3, x1 - x0 + 3), dtype=bool)
    sub[1:-1, 1:-1] = cov[y0 : y1 + 1, x0 : x1 + 1]
    background = ~sub

    reached = np.zeros_like(background)
    frontier = np.zeros_like(background)
    frontier[0, :] = frontier[-1, :] = frontier[:, 0] = frontier[:, -1] = True
    while frontier.any():
        reached |= frontier
        grown = np.zeros_like(frontier)
        grown[1:, :] |= frontier[:-1, :]
        grown[:-1, :] |= frontier[1:, :]
        grown[:, 1:] |= frontier[:, :-1]
        grown[:, :-1] |= frontier[:, 1:]
        frontier = grown & background & ~reached

    out = cov.copy()
    out[y0 : y1 + 1, x0 : x1 + 1] = ~reached[1:-1, 1:-1]
    return out


def compose_index_mask(
    masks: Sequence[np.ndarray], depths: Sequence[DepthBuffer]
) -> IndexMask:
    """Resolve per-instance masks into one index image by nearest depth.

    Filled-hole pixels (mask true, no rasterized coverage) rank behind every
    real surface; between holes the smaller instance id wins.
    """
    if len(masks) != len(depths):
        raise ValueError("need one depth buffer per mask")
    if len(masks) == 0:
        raise ValueError("need at least one instance")
    shape = np.asarray(masks[0]).shape
    for m, d in zip(masks, depths):
        if np.asarray(m).shape != shape or d.depth.shape != shape:
            raise ValueError("mask/depth dimensions differ")

    effective = np.full((len(masks),) + shape, np.inf)
    for i, (m, d) in enumerate(zip(masks, depths)):
        m = np.asarray(m, dtype=bool)
        effective[i] = np.where(m, np.where(np.isfinite(d.depth), d.depth, HOLE_DEPTH), np.inf)

    winner = effective.argmin(axis=0)  # ties resolve to the smallest index
    covered = np.stack([np.asarray(m, dtype=bool) for m in masks]).any(axis=0)
    labels = np.where(covered, winner + 1, 0).astype(np.uint16)
    return IndexMask(labels)


def erase_instance(index_mask: IndexMask, instance_id: int) -> IndexMask:
    """Relabel one instance's pixels as background."""
    if instance_id not in index_mask.instance_ids():
        raise ValueError(f"instance {instance_id} not present in index mask")
    labels = index_mask.labels.copy()
    labels[labels == instance_id] = 0
    return IndexMask(labels)


def visible_keypoints(
    keypoints: KeypointSet3D,
    pose: Pose,
    camera: CameraIntrinsics,
    scene_depth: DepthBuffer,
    depth_eps: float = DEPTH_EPS,
) -> KeypointScreenState:
    """Flag keypoints visible when in-image and not behind the scene surface."""
    uv, z = project_points(camera, pose, keypoints.positions)
    visible = (z > Z_MIN) & camera.contains(np.nan_to_num(uv, nan=-1.0))
    idx = np.nonzero(visible)[0]
    if idx.size:
        ix = np.floor(uv[idx, 0]).astype(int)
        iy = np.floor(uv[idx, 1]).astype(int)
        visible[idx] &= z[idx] <= scene_depth.depth[iy, ix] + depth_eps
    return KeypointScreenState(keypoints.semantic_ids.copy(), uv, z, visible)


def combine_depth(depths: Sequence[DepthBuffer]) -> DepthBuffer:
    """Scene z-buffer: per-pixel minimum over instance depth buffers."""
    if len(depths) == 0:
        raise ValueError("need at least one depth buffer")
    stacked = np.stack([d.depth for d in depths])
    return DepthBuffer(stacked.min(axis=0))


def render_heatmaps(
    pixels: np.ndarray,
    visible: np.ndarray,
    image_size: tuple[int, int],
    map_size: tuple[int, int] | None = None,
    sigma: float = 2.0,
) -> np.ndarray:
    """Gaussian target maps, one per keypoint, peak 1.0 at the annotated pixel.

    ``map_size`` (w, h) optionally downscales from ``image_size``; invisible
    keypoints yield all-zero maps. Returns an (N, h, w) float32 stack, so keep
    map sizes modest for large keypoint sets.
    """
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    iw, ih = image_size
    mw, mh = map_size if map_size is not None else (iw, ih)
    sx, sy = mw / iw, mh / ih

    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    visible = np.asarray(visible, dtype=bool)
    xs = np.arange(mw, dtype=np.float64)
    ys = np.arange(mh, dtype=np.float64)

    maps = np.zeros((len(pixels), mh, mw), dtype=np.float32)
    denom = 2.0 * sigma * sigma
    for i, (pix, vis) in enumerate(zip(pixels, visible)):
        if not vis:
            continue
        mu_x = float(np.floor(pix[0] * sx))
        mu_y = float(np.floor(pix[1] * sy))
        gauss = np.exp(-(np.add.outer((ys - mu_y) ** 2, (xs - mu_x) ** 2)) / denom)
        maps[i] = np.clip(gauss, 0.0, 1.0).astype(np.float32)
    return maps


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Grow a boolean mask by ``radius`` 4-neighborhood passes."""
    out = np.asarray(mask, dtype=bool).copy()
    for _ in range(max(0, radius)):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out
