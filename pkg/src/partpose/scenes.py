"""Randomized multi-part scene generation and labeled dataset storage.

A scene is a handful of instances of one part dropped into a camera-frame
box with uniformly random orientations. Physical plausibility is a
bounding-sphere separation test, which conservatively guarantees parts never
interpenetrate. Annotations are geometry-exact: index mask, per-instance
visible keypoints, and tight bounding boxes.

On-disk layout::

    <root>/manifest                  JSON index: seed, camera, split, scene ids
    <root>/scenes/<id>/mask.png      16-bit single-channel index mask
    <root>/scenes/<id>/annotation    JSON: per-instance pose + keypoints + bbox
    <root>/scenes/<id>/image.png     optional composite for eyeballing
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, KeypointSet3D, Pose, random_rotation
from .mesh import TriangleMesh
from .raster import (
    DepthBuffer,
    IndexMask,
    combine_depth,
    compose_index_mask,
    mask_from_silhouette,
    rasterize,
    visible_keypoints,
)

MANIFEST_NAME = "manifest"
PLACEMENT_ATTEMPTS = 1000


class ScenePlacementError(RuntimeError):
    """Raised when the rejection sampler cannot place all parts."""


@dataclass(frozen=True)
class SceneSpec:
    """Sampling recipe for one scene."""

    camera: CameraIntrinsics
    box_low: np.ndarray  # (3,) camera-frame translation box corner, meters
    box_high: np.ndarray  # (3,)
    collision_radius: float  # part bounding-sphere radius, meters
    parts_min: int = 5
    parts_max: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        low = np.asarray(self.box_low, dtype=np.float64).copy()
        high = np.asarray(self.box_high, dtype=np.float64).copy()
        if low.shape != (3,) or high.shape != (3,):
            raise ValueError("translation box corners must be 3-vectors")
        if np.any(high < low):
            raise ValueError("box_high must dominate box_low")
        if low[2] <= 0.0:
            raise ValueError("translation box must sit strictly in front of the camera")
        if self.parts_min < 1 or self.parts_max < self.parts_min:
            raise ValueError("invalid part count range")
        if self.collision_radius <= 0.0:
            raise ValueError("collision radius must be positive")
        low.flags.writeable = False
        high.flags.writeable = False
        object.__setattr__(self, "box_low", low)
        object.__setattr__(self, "box_high", high)


@dataclass(frozen=True)
class InstanceAnnotation:
    instance_id: int
    pose: Pose
    bbox: tuple[int, int, int, int] | None  # inclusive (x0, y0, x1, y1)
    keypoint_ids: np.ndarray  # (M,) semantic ids of visible keypoints
    keypoint_pixels: np.ndarray  # (M, 2) subpixel projections
    mask_area: int = 0  # pixels of the instance's own filled silhouette
    owned_area: int = 0  # pixels the instance keeps in the scene index mask

    @property
    def visibility(self) -> float:
        """Unoccluded fraction of the silhouette, in [0, 1]."""
        return self.owned_area / self.mask_area if self.mask_area else 0.0


@dataclass(frozen=True)
class SceneAnnotation:
    instances: tuple[InstanceAnnotation, ...]
    index_mask: IndexMask


@dataclass(frozen=True)
class Scene:
    scene_id: str
    annotation: SceneAnnotation


def sample_scene(spec: SceneSpec, rng: np.random.Generator | None = None) -> list[tuple[int, Pose]]:
    """Draw non-colliding instance poses; deterministic given the spec seed."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    count = int(rng.integers(spec.parts_min, spec.parts_max + 1))
    min_dist = 2.0 * spec.collision_radius

    placed: list[tuple[int, Pose]] = []
    centers: list[np.ndarray] = []
    attempts = 0
    while len(placed) < count:
        if attempts >= PLACEMENT_ATTEMPTS:
            raise ScenePlacementError(
                f"cannot place parts: {len(placed)}/{count} placed after {attempts} attempts"
            )
        attempts += 1
        quat = random_rotation(rng)
        t = rng.uniform(spec.box_low, spec.box_high)
        if any(np.linalg.norm(t - c) < min_dist for c in centers):
            continue
        centers.append(t)
        placed.append((len(placed) + 1, Pose(quat, t)))
    return placed


def _tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def annotate_scene(
    poses: list[tuple[int, Pose]],
    mesh: TriangleMesh,
    keypoints: KeypointSet3D,
    camera: CameraIntrinsics,
) -> SceneAnnotation:
    """Run the labeling pipeline over every instance of a scene.

    Per-instance masks are the filled silhouettes of each part rendered alone,
    so bounding boxes do not shrink under occlusion; keypoint visibility uses
    the full-scene z-buffer.
    """
    if not poses:
        raise ValueError("scene has no instances")
    ids = [iid for iid, _ in poses]
    if ids != list(range(1, len(poses) + 1)):
        raise ValueError("instance ids must be contiguous from 1")

    masks: list[np.ndarray] = []
    depths: list[DepthBuffer] = []
    for _, pose in poses:
        coverage, depth = rasterize(mesh, pose, camera)
        masks.append(mask_from_silhouette(coverage))
        depths.append(depth)

    index_mask = compose_index_mask(masks, depths)
    scene_depth = combine_depth(depths)

    instances = []
    for (iid, pose), mask in zip(poses, masks):
        state = visible_keypoints(keypoints, pose, camera, scene_depth)
        vis = state.visible
        instances.append(
            InstanceAnnotation(
                instance_id=iid,
                pose=pose,
                bbox=_tight_bbox(mask),
                keypoint_ids=state.semantic_ids[vis].copy(),
                keypoint_pixels=state.pixels[vis].copy(),
                mask_area=int(mask.sum()),
                owned_area=int((index_mask.labels == iid).sum()),
            )
        )
    return SceneAnnotation(tuple(instances), index_mask)


def generate_scene(
    spec: SceneSpec, mesh: TriangleMesh, keypoints: KeypointSet3D
) -> SceneAnnotation:
    return annotate_scene(sample_scene(spec), mesh, keypoints, spec.camera)


def scene_seed(root_seed: int, index: int, stream: int = 0) -> int:
    """Stable per-scene child seed; ``stream`` separates unrelated consumers."""
    return int(np.random.SeedSequence([root_seed, stream, index]).generate_state(1)[0])


def generate_scenes(
    spec: SceneSpec, mesh: TriangleMesh, keypoints: KeypointSet3D, count: int
) -> list[Scene]:
    scenes = []
    for i in range(count):
        per_scene = replace(spec, seed=scene_seed(spec.seed, i))
        scenes.append(Scene(f"{i:04d}", generate_scene(per_scene, mesh, keypoints)))
    return scenes


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _annotation_to_dict(annotation: SceneAnnotation) -> dict:
    instances = []
    for inst in annotation.instances:
        instances.append(
            {
                "instance_id": inst.instance_id,
                "pose": {
                    "quat_wxyz": [float(x) for x in inst.pose.quat],
                    "t_xyz": [float(x) for x in inst.pose.t],
                },
                "bbox": list(inst.bbox) if inst.bbox is not None else None,
                "mask_area": inst.mask_area,
                "owned_area": inst.owned_area,
                "keypoints": [
                    [int(sid), float(u), float(v)]
                    for sid, (u, v) in zip(inst.keypoint_ids, inst.keypoint_pixels)
                ],
            }
        )
    return {"instances": instances}


def _annotation_from_dict(data: dict, index_mask: IndexMask) -> SceneAnnotation:
    instances = []
    for rec in data["instances"]:
        kps = np.array(rec["keypoints"], dtype=np.float64).reshape(-1, 3)
        instances.append(
            InstanceAnnotation(
                instance_id=int(rec["instance_id"]),
                pose=Pose(np.array(rec["pose"]["quat_wxyz"]), np.array(rec["pose"]["t_xyz"])),
                bbox=tuple(int(v) for v in rec["bbox"]) if rec["bbox"] is not None else None,
                keypoint_ids=kps[:, 0].astype(np.int64),
                keypoint_pixels=kps[:, 1:3].copy(),
                mask_area=int(rec["mask_area"]),
                owned_area=int(rec["owned_area"]),
            )
        )
    return SceneAnnotation(tuple(instances), index_mask)


def annotations_equal(a: SceneAnnotation, b: SceneAnnotation) -> bool:
    if len(a.instances) != len(b.instances):
        return False
    if not np.array_equal(a.index_mask.labels, b.index_mask.labels):
        return False
    for ia, ib in zip(a.instances, b.instances):
        if ia.instance_id != ib.instance_id or ia.bbox != ib.bbox:
            return False
        if ia.mask_area != ib.mask_area or ia.owned_area != ib.owned_area:
            return False
        if not np.array_equal(ia.pose.quat, ib.pose.quat):
            return False
        if not np.array_equal(ia.pose.t, ib.pose.t):
            return False
        if not np.array_equal(ia.keypoint_ids, ib.keypoint_ids):
            return False
        if not np.array_equal(ia.keypoint_pixels, ib.keypoint_pixels):
            return False
    return True


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def save_index_mask(mask: IndexMask, path: Path) -> None:
    Image.fromarray(mask.labels.astype(np.uint16), mode="I;16").save(path, format="PNG")


def load_index_mask(path: Path) -> IndexMask:
    arr = np.array(Image.open(path), dtype=np.uint16)
    return IndexMask(arr)


def composite_image(
    index_mask: IndexMask, background: np.ndarray | None = None
) -> np.ndarray:
    """Flat-colored instance visualization over an optional background.

    Appearance only; labels are unaffected by the chosen background.
    """
    h, w = index_mask.labels.shape
    if background is None:
        image = np.full((h, w, 3), 96, dtype=np.uint8)
    else:
        image = np.asarray(background, dtype=np.uint8)
        if image.shape[:2] != (h, w):
            raise ValueError("background size must match the index mask")
        image = image[:, :, :3].copy()
    for iid in index_mask.instance_ids():
        color = instance_color(int(iid))
        image[index_mask.labels == iid] = color
    return image


def instance_color(instance_id: int) -> tuple[int, int, int]:
    palette = [
        (230, 80, 60),
        (70, 160, 230),
        (90, 200, 120),
        (240, 190, 60),
        (170, 110, 220),
        (240, 130, 190),
        (110, 210, 210),
        (200, 200, 200),
    ]
    return palette[(instance_id - 1) % len(palette)]


def write_dataset(
    scenes: list[Scene],
    root: str | Path,
    camera: CameraIntrinsics,
    seed: int,
    split_fraction: float = 0.9,
    extra: dict | None = None,
    background: np.ndarray | None = None,
    write_images: bool = False,
) -> dict:
    """Write scene records plus a manifest; returns the manifest dict.

    The train/test split is a seeded shuffle cut at ``split_fraction``, so the
    output bytes are a pure function of the inputs.
    """
    root = Path(root)
    seen: set[str] = set()
    for scene in scenes:
        if scene.scene_id in seen:
            raise ValueError(f"duplicate scene id {scene.scene_id}")
        seen.add(scene.scene_id)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(scenes))
    n_train = int(len(scenes) * split_fraction + 0.5)
    train_ids = {scenes[i].scene_id for i in order[:n_train]}

    (root / "scenes").mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        scene_dir = root / "scenes" / scene.scene_id
        scene_dir.mkdir(parents=True, exist_ok=True)
        save_index_mask(scene.annotation.index_mask, scene_dir / "mask.png")
        _write_json(scene_dir / "annotation", _annotation_to_dict(scene.annotation))
        if write_images:
            img = composite_image(scene.annotation.index_mask, background)
            Image.fromarray(img, mode="RGB").save(scene_dir / "image.png", format="PNG")

    manifest = {
        "camera": {
            "fx": camera.fx,
            "fy": camera.fy,
            "cx": camera.cx,
            "cy": camera.cy,
            "width": camera.width,
            "height": camera.height,
        },
        "seed": seed,
        "split_fraction": split_fraction,
        "scenes": [
            {"id": s.scene_id, "split": "train" if s.scene_id in train_ids else "test"}
            for s in scenes
        ],
        "counts": {
            "total": len(scenes),
            "train": len(train_ids),
            "test": len(scenes) - len(train_ids),
        },
    }
    if extra:
        manifest.update(extra)
    _write_json(root / MANIFEST_NAME, manifest)
    return manifest


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found under {root}")
    return json.loads(path.read_text())


def camera_from_manifest(manifest: dict) -> CameraIntrinsics:
    cam = manifest["camera"]
    return CameraIntrinsics(
        fx=float(cam["fx"]),
        fy=float(cam["fy"]),
        cx=float(cam["cx"]),
        cy=float(cam["cy"]),
        width=int(cam["width"]),
        height=int(cam["height"]),
    )


def read_scene(root: str | Path, scene_id: str) -> SceneAnnotation:
    scene_dir = Path(root) / "scenes" / scene_id
    if not scene_dir.exists():
        raise FileNotFoundError(f"scene {scene_id} not found under {root}")
    mask = load_index_mask(scene_dir / "mask.png")
    data = json.loads((scene_dir / "annotation").read_text())
    return _annotation_from_dict(data, mask)
