"""Triangle meshes, edge polylines, and keypoint sampling along edges.

Meshes are plain ASCII Wavefront OBJ (``v``/``f`` records). Which edges carry
keypoints is not derivable from the mesh alone, so it comes from an auxiliary
polyline file: one line per edge, each line a whitespace-separated list of
vertex indices (0-based); the line number is the edge id.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import KeypointSet3D

# Triangles with less area than this are dropped at load time (square meters).
DEGENERATE_AREA = 1e-16


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) model frame, meters
    triangles: np.ndarray  # (T, 3) vertex indices

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValueError("triangles must be (T, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        v = v.copy()
        t = t.copy()
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def without_degenerate_triangles(self) -> "TriangleMesh":
        keep = self.triangle_areas() > DEGENERATE_AREA
        return TriangleMesh(self.vertices, self.triangles[keep])

    def bounding_radius(self) -> float:
        """Radius of the bounding sphere centered at the AABB center."""
        center = 0.5 * (self.vertices.min(axis=0) + self.vertices.max(axis=0))
        return float(np.linalg.norm(self.vertices - center, axis=1).max())


def load_obj(path: str | Path) -> TriangleMesh:
    """Load an ASCII OBJ mesh; polygon faces are fan-triangulated."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise ValueError(f"{path}:{lineno}: malformed vertex record")
            vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif parts[0] == "f":
            idx = []
            for token in parts[1:]:
                i = int(token.split("/")[0])
                if i <= 0:
                    raise ValueError(f"{path}:{lineno}: only positive face indices supported")
                idx.append(i - 1)
            if len(idx) < 3:
                raise ValueError(f"{path}:{lineno}: face needs at least 3 vertices")
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not vertices or not faces:
        raise ValueError(f"{path}: no triangles found")
    mesh = TriangleMesh(np.array(vertices), np.array(faces))
    return mesh.without_degenerate_triangles()


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    lines = ["# ascii triangle mesh"]
    for v in mesh.vertices:
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_edge_polylines(path: str | Path) -> list[np.ndarray]:
    """One polyline (vertex-index array) per line; line order is the edge id."""
    polylines: list[np.ndarray] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        indices = np.array([int(tok) for tok in line.split()], dtype=np.int64)
        if indices.size < 2:
            raise ValueError(f"{path}:{lineno}: polyline needs at least 2 vertices")
        polylines.append(indices)
    if not polylines:
        raise ValueError(f"{path}: no polylines found")
    return polylines


def save_edge_polylines(polylines: list[np.ndarray], path: str | Path) -> None:
    lines = ["# one edge polyline per line: vertex indices (0-based)"]
    for poly in polylines:
        lines.append(" ".join(str(int(i)) for i in poly))
    Path(path).write_text("\n".join(lines) + "\n")


def sample_edge_keypoints(
    mesh: TriangleMesh, polylines: list[np.ndarray], total: int = 700
) -> KeypointSet3D:
    """Place ``total`` keypoints at uniform arc length along the edge polylines.

    Counts are split across edges proportionally to arc length (largest
    remainder), and points sit at segment-interior stations so shared corner
    vertices never duplicate.
    """
    if total < len(polylines):
        raise ValueError("need at least one keypoint per edge polyline")
    lengths = []
    for poly in polylines:
        pts = mesh.vertices[poly]
        lengths.append(float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()))
    lengths_arr = np.array(lengths)
    if lengths_arr.min() <= 0.0:
        raise ValueError("zero-length edge polyline")
    quota = lengths_arr / lengths_arr.sum() * total
    counts = np.maximum(1, np.floor(quota).astype(int))
    while counts.sum() < total:
        counts[np.argmax(quota - counts)] += 1
    while counts.sum() > total:
        candidates = np.where(counts > 1)[0]
        counts[candidates[np.argmin((quota - counts)[candidates])]] -= 1

    positions = []
    edge_ids = []
    for edge_id, (poly, count) in enumerate(zip(polylines, counts)):
        pts = mesh.vertices[poly]
        seg = np.diff(pts, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        stations = (np.arange(count) + 0.5) / count * cum[-1]
        seg_idx = np.clip(np.searchsorted(cum, stations, side="right") - 1, 0, len(seg) - 1)
        frac = (stations - cum[seg_idx]) / seg_len[seg_idx]
        positions.append(pts[seg_idx] + frac[:, None] * seg[seg_idx])
        edge_ids.append(np.full(count, edge_id, dtype=np.int64))

    positions_arr = np.concatenate(positions)
    edge_arr = np.concatenate(edge_ids)
    return KeypointSet3D(np.arange(len(positions_arr)), edge_arr, positions_arr)


def make_bracket(
    width: float = 0.06,
    height: float = 0.06,
    leg: float = 0.015,
    thickness: float = 0.012,
) -> tuple[TriangleMesh, list[np.ndarray]]:
    """L-shaped bracket centered at the origin, plus its outline polylines.

    The part is an extruded L profile, a stand-in for a small machined part.
    Each straight outline segment of the two large faces is one numbered edge
    (12 edges total), which keeps the keypoints non-coplanar.
    """
    hx, hy, hz = width / 2.0, height / 2.0, thickness / 2.0
    # L outline in the XY plane, counter-clockwise, plus the reflex corner
    # split point Q on the left edge used by the face triangulation.
    outline = np.array(
        [
            [-hx, -hy],  # 0
            [hx, -hy],  # 1
            [hx, -hy + leg],  # 2
            [-hx + leg, -hy + leg],  # 3
            [-hx + leg, hy],  # 4
            [-hx, hy],  # 5
        ]
    )
    q_split = np.array([-hx, -hy + leg])  # 6, lies on segment 5 -> 0
    plane = np.vstack([outline, q_split])
    top = np.hstack([plane, np.full((7, 1), hz)])
    bottom = np.hstack([plane, np.full((7, 1), -hz)])
    vertices = np.vstack([top, bottom])  # top face = 0..6, bottom face = 7..13

    def face(i0: int, i1: int, i2: int, offset: int) -> list[int]:
        return [i0 + offset, i1 + offset, i2 + offset]

    triangles = []
    for offset in (0, 7):
        # bottom bar of the L: rectangle 0-1-2 + 0-2-3 (via split corner 6)
        triangles.append(face(0, 1, 2, offset))
        triangles.append(face(0, 2, 3, offset))
        # upright of the L: rectangle 6-3-4 + 6-4-5
        triangles.append(face(6, 3, 4, offset))
        triangles.append(face(6, 4, 5, offset))
    # side walls around the outline
    for a, b in zip(range(6), [1, 2, 3, 4, 5, 0]):
        triangles.append([a, b, b + 7])
        triangles.append([a, b + 7, a + 7])

    mesh = TriangleMesh(vertices, np.array(triangles))

    polylines: list[np.ndarray] = []
    for offset in (0, 7):
        for a, b in zip(range(6), [1, 2, 3, 4, 5, 0]):
            polylines.append(np.array([a + offset, b + offset], dtype=np.int64))
    return mesh, polylines
