"""From raw multi-part keypoint detections to per-instance poses.

The detector abstraction is a per-region record (box, score, keypoints with
confidences); any producer can feed the estimator, including the bundled
simulator that jitters ground-truth annotations. Clustered regions are
resolved by repeated RANSAC (inliers peel off one pose candidate at a time,
ranked by reprojection error), and scenes are processed sequentially in
detection-confidence order: each solved part's pixels are erased so its
stray detections cannot contaminate the parts still waiting, mirroring how
mutual reflections between neighboring shiny parts get neutralized by
re-rendering solved parts out of the image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Correspondence,
    KeypointSet3D,
    Pose,
    project_points,
    residual_norms,
    rotation_angle_deg,
    Z_MIN,
)
from .mesh import TriangleMesh
from .pnp import PnPResult, PoseEstimationError, RansacConfig, solve_pnp_ransac
from .raster import dilate_mask, mask_from_silhouette, rasterize
from .scenes import SceneAnnotation


@dataclass(frozen=True)
class KeypointDetection:
    semantic_id: int
    u: float
    v: float
    confidence: float  # heatmap-peak style localization confidence d_i

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError("keypoint confidence must lie in [0, 1]")


@dataclass(frozen=True)
class RegionDetection:
    """One detected region of interest plus the keypoints found inside it."""

    bbox: tuple[float, float, float, float]  # (x0, y0, x1, y1)
    score: float  # detection confidence in [0, 1]
    keypoints: tuple[KeypointDetection, ...]
    instance_id: int | None = None  # ground-truth provenance when simulated

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError("region score must lie in [0, 1]")
        object.__setattr__(self, "keypoints", tuple(self.keypoints))
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))


@dataclass(frozen=True)
class SimulatedDetectorConfig:
    """Stand-in for the detection networks, driven by ground truth."""

    noise_sigma: float = 2.0  # isotropic keypoint noise, pixels
    dropout: float = 0.1  # probability a visible keypoint goes undetected
    contamination: float = 0.1  # rate of keypoints leaking from overlapping parts
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_sigma < 0.0:
            raise ValueError("noise sigma must be non-negative")
        if not (0.0 <= self.dropout <= 1.0):
            raise ValueError("dropout must lie in [0, 1]")
        if not (0.0 <= self.contamination <= 1.0):
            raise ValueError("contamination must lie in [0, 1]")


@dataclass(frozen=True)
class EstimationConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    accept_threshold_px: float = 5.0  # weighted RMS bound for accepting a pose
    candidate_cap: int = 3  # pose candidates peeled per region
    erase_margin_px: int = 4  # dilation of erased instance masks
    # Detections within this multiple of the inlier threshold of a solved
    # candidate count as explained by it (noise tails), so they never seed a
    # spurious follow-up cluster. Only genuinely foreign detections remain.
    explain_factor: float = 3.0

    def __post_init__(self) -> None:
        if self.accept_threshold_px <= 0.0:
            raise ValueError("acceptance threshold must be positive")
        if self.candidate_cap < 1:
            raise ValueError("candidate cap must be at least 1")
        if self.erase_margin_px < 0:
            raise ValueError("erase margin must be non-negative")
        if self.explain_factor < 1.0:
            raise ValueError("explain factor must be at least 1")


@dataclass(frozen=True)
class InstanceEstimate:
    instance_id: int
    result: PnPResult | None
    accepted: bool
    error: float  # weighted RMS reprojection error, inf when unsolved

    def __post_init__(self) -> None:
        if self.accepted and self.result is None:
            raise ValueError("accepted estimate must carry a result")


# ---------------------------------------------------------------------------
# Detector simulation
# ---------------------------------------------------------------------------

def _boxes_overlap(a: tuple[float, ...], b: tuple[float, ...]) -> bool:
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]


def _inside_box(u: float, v: float, box: tuple[float, ...]) -> bool:
    return box[0] <= u <= box[2] and box[1] <= v <= box[3]


def _noisy_detection(
    sid: int, u: float, v: float, sigma: float, rng: np.random.Generator
) -> KeypointDetection:
    if sigma > 0.0:
        du, dv = rng.normal(0.0, sigma, size=2)
    else:
        du = dv = 0.0
    confidence = math.exp(-(du * du + dv * dv) / (2.0 * sigma * sigma)) if sigma > 0 else 1.0
    return KeypointDetection(sid, u + du, v + dv, confidence)


def simulate_detections(
    annotation: SceneAnnotation, config: SimulatedDetectorConfig
) -> list[RegionDetection]:
    """Ground-truth-driven detections with noise, dropout, and contamination.

    A region's detection score is the instance's unoccluded silhouette
    fraction (what a detector's confidence tracks: front parts score higher
    than parts hidden behind them). Each kept keypoint gets isotropic
    Gaussian position noise with a confidence decaying like a heatmap peak,
    and overlapping instances leak keypoints into each other's regions at
    the contamination rate.
    """
    rng = np.random.default_rng(config.seed)
    instances = [inst for inst in annotation.instances if inst.bbox is not None]
    if not instances:
        return []

    boxes: list[tuple[float, float, float, float]] = []
    own_kps: list[list[KeypointDetection]] = []
    for inst in instances:
        x0, y0, x1, y1 = inst.bbox
        bw, bh = x1 - x0 + 1, y1 - y0 + 1
        jitter = rng.uniform(-0.05, 0.05, size=4)
        boxes.append(
            (
                x0 + jitter[0] * bw,
                y0 + jitter[1] * bh,
                x1 + jitter[2] * bw,
                y1 + jitter[3] * bh,
            )
        )
        kept = []
        for sid, (u, v) in zip(inst.keypoint_ids, inst.keypoint_pixels):
            if config.dropout > 0.0 and rng.uniform() < config.dropout:
                continue
            kept.append(_noisy_detection(int(sid), float(u), float(v), config.noise_sigma, rng))
        own_kps.append(kept)

    regions = []
    for i, inst in enumerate(instances):
        keypoints = list(own_kps[i])
        if config.contamination > 0.0:
            for j, other in enumerate(instances):
                if j == i or not _boxes_overlap(boxes[i], boxes[j]):
                    continue
                for sid, (u, v) in zip(other.keypoint_ids, other.keypoint_pixels):
                    if not _inside_box(float(u), float(v), boxes[i]):
                        continue
                    if rng.uniform() < config.contamination:
                        keypoints.append(
                            _noisy_detection(int(sid), float(u), float(v), config.noise_sigma, rng)
                        )
        regions.append(
            RegionDetection(
                bbox=boxes[i],
                score=min(1.0, inst.visibility),
                keypoints=tuple(keypoints),
                instance_id=inst.instance_id,
            )
        )
    return regions


def save_detections(regions: list[RegionDetection], path: str | Path) -> None:
    """Per-image detections interchange file (what a CNN detector would emit)."""
    payload = {
        "regions": [
            {
                "bbox": list(r.bbox),
                "score": r.score,
                "instance_id": r.instance_id,
                "keypoints": [[k.semantic_id, k.u, k.v, k.confidence] for k in r.keypoints],
            }
            for r in regions
        ]
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_detections(path: str | Path) -> list[RegionDetection]:
    data = json.loads(Path(path).read_text())
    regions = []
    for rec in data["regions"]:
        regions.append(
            RegionDetection(
                bbox=tuple(float(v) for v in rec["bbox"]),
                score=float(rec["score"]),
                instance_id=None if rec.get("instance_id") is None else int(rec["instance_id"]),
                keypoints=tuple(
                    KeypointDetection(int(sid), float(u), float(v), float(d))
                    for sid, u, v, d in rec["keypoints"]
                ),
            )
        )
    return regions


# ---------------------------------------------------------------------------
# Clustering and sequential estimation
# ---------------------------------------------------------------------------

def _to_correspondences(
    keypoints: tuple[KeypointDetection, ...], keypoints3d: KeypointSet3D
) -> list[Correspondence]:
    return [
        Correspondence(
            semantic_id=k.semantic_id,
            point3d=keypoints3d.positions[k.semantic_id],
            point2d=np.array([k.u, k.v]),
            weight=k.confidence,
        )
        for k in keypoints
    ]


def _cluster_candidates(
    detections: tuple[KeypointDetection, ...],
    keypoints3d: KeypointSet3D,
    camera: CameraIntrinsics,
    config: EstimationConfig,
    instance_id: int,
) -> list[InstanceEstimate]:
    correspondences = _to_correspondences(detections, keypoints3d)
    results: list[PnPResult] = []
    remaining = correspondences
    while len(results) < config.candidate_cap and len(remaining) >= 6:
        try:
            result = solve_pnp_ransac(remaining, camera, config.ransac)
        except PoseEstimationError:
            break
        results.append(result)
        p3 = np.array([c.point3d for c in remaining])
        p2 = np.array([c.point2d for c in remaining])
        explained = residual_norms(camera, result.pose, p3, p2)
        cutoff = config.explain_factor * config.ransac.inlier_threshold
        remaining = [c for c, r in zip(remaining, explained) if r >= cutoff]

    order = sorted(
        range(len(results)),
        key=lambda i: (results[i].error, -len(results[i].inlier_indices), i),
    )
    return [
        InstanceEstimate(
            instance_id=instance_id,
            result=results[i],
            accepted=results[i].error <= config.accept_threshold_px,
            error=results[i].error,
        )
        for i in order
    ]


def cluster_and_select(
    region: RegionDetection,
    keypoints3d: KeypointSet3D,
    camera: CameraIntrinsics,
    config: EstimationConfig,
) -> list[InstanceEstimate]:
    """Peel pose candidates out of one region's detections, best first.

    The first RANSAC consensus forms candidate 1; its outliers, when at least
    six remain, are re-solved for candidate 2, and so on up to the cap.
    Candidates are ranked by weighted reprojection error (ties: larger inlier
    count, then extraction order). Returns an empty list when nothing reaches
    consensus.
    """
    instance_id = region.instance_id if region.instance_id is not None else 0
    return _cluster_candidates(region.keypoints, keypoints3d, camera, config, instance_id)


def estimate_scene(
    regions: list[RegionDetection],
    mesh: TriangleMesh,
    keypoints3d: KeypointSet3D,
    camera: CameraIntrinsics,
    config: EstimationConfig,
) -> list[InstanceEstimate]:
    """Confidence-ordered sequential pose estimation with instance erasure.

    Regions are processed by descending detection score (ties by input
    order). After each accepted pose the instance is rasterized at that pose
    and its dilated pixel area is erased: detections falling inside it are
    dropped from every region not yet processed. Failures come back as
    not-accepted estimates rather than errors.
    """
    order = sorted(range(len(regions)), key=lambda i: (-regions[i].score, i))
    erased = np.zeros((camera.height, camera.width), dtype=bool)
    estimates: list[InstanceEstimate] = []

    for idx in order:
        region = regions[idx]
        instance_id = region.instance_id if region.instance_id is not None else idx + 1
        live = tuple(k for k in region.keypoints if not _is_erased(k, erased))
        if len(live) < 6:
            estimates.append(InstanceEstimate(instance_id, None, False, math.inf))
            continue
        candidates = _cluster_candidates(live, keypoints3d, camera, config, instance_id)
        if not candidates:
            estimates.append(InstanceEstimate(instance_id, None, False, math.inf))
            continue
        # The region was detected around one part, so its pose is the
        # candidate that explains the most of the region; raw error cannot
        # tell a part from the reflection of a neighbor, which is why the
        # erasure step below exists.
        best = min(
            candidates,
            key=lambda c: (-len(c.result.inlier_indices), c.error),
        )
        estimates.append(best)
        if best.accepted:
            coverage, _ = rasterize(mesh, best.result.pose, camera)
            mask = dilate_mask(mask_from_silhouette(coverage), config.erase_margin_px)
            erased |= mask
    return estimates


def _is_erased(detection: KeypointDetection, erased: np.ndarray) -> bool:
    ix, iy = int(math.floor(detection.u)), int(math.floor(detection.v))
    if 0 <= iy < erased.shape[0] and 0 <= ix < erased.shape[1]:
        return bool(erased[iy, ix])
    return False


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceEvaluation:
    instance_id: int
    matched: bool
    accepted: bool
    rotation_error_deg: float
    translation_error_m: float
    reprojection_error_px: float  # mean keypoint displacement under the estimate


@dataclass(frozen=True)
class EvaluationReport:
    per_instance: tuple[InstanceEvaluation, ...]
    mean_rotation_deg: float
    median_rotation_deg: float
    mean_translation_m: float
    median_translation_m: float
    acceptance_rate: float
    within_5deg_5cm: float
    misses: int

    def to_dict(self) -> dict:
        return {
            "per_instance": [
                {
                    "instance_id": r.instance_id,
                    "matched": r.matched,
                    "accepted": r.accepted,
                    "rotation_error_deg": r.rotation_error_deg,
                    "translation_error_m": r.translation_error_m,
                    "reprojection_error_px": r.reprojection_error_px,
                }
                for r in self.per_instance
            ],
            "mean_rotation_deg": self.mean_rotation_deg,
            "median_rotation_deg": self.median_rotation_deg,
            "mean_translation_m": self.mean_translation_m,
            "median_translation_m": self.median_translation_m,
            "acceptance_rate": self.acceptance_rate,
            "within_5deg_5cm": self.within_5deg_5cm,
            "misses": self.misses,
        }


def _keypoint_displacement(
    estimated: Pose, truth: Pose, keypoints3d: KeypointSet3D, camera: CameraIntrinsics
) -> float:
    uv_est, z_est = project_points(camera, estimated, keypoints3d.positions)
    uv_true, z_true = project_points(camera, truth, keypoints3d.positions)
    valid = (z_est > Z_MIN) & (z_true > Z_MIN)
    if not valid.any():
        return math.inf
    diff = uv_est[valid] - uv_true[valid]
    return float(np.hypot(diff[:, 0], diff[:, 1]).mean())


def aggregate_rows(rows: list[InstanceEvaluation]) -> EvaluationReport:
    """Summary statistics over per-instance rows (possibly spanning scenes)."""
    matched = [r for r in rows if r.matched]
    total = len(rows)
    rot = np.array([r.rotation_error_deg for r in matched])
    trans = np.array([r.translation_error_m for r in matched])
    hits = sum(
        1 for r in matched if r.rotation_error_deg < 5.0 and r.translation_error_m < 0.05
    )
    return EvaluationReport(
        per_instance=tuple(rows),
        mean_rotation_deg=float(rot.mean()) if matched else math.nan,
        median_rotation_deg=float(np.median(rot)) if matched else math.nan,
        mean_translation_m=float(trans.mean()) if matched else math.nan,
        median_translation_m=float(np.median(trans)) if matched else math.nan,
        acceptance_rate=sum(1 for r in rows if r.accepted) / total if total else 0.0,
        within_5deg_5cm=hits / total if total else 0.0,
        misses=sum(1 for r in rows if not r.matched),
    )


def evaluate(
    estimates: list[InstanceEstimate],
    annotation: SceneAnnotation,
    keypoints3d: KeypointSet3D,
    camera: CameraIntrinsics,
) -> EvaluationReport:
    """Score estimates against ground truth; unmatched instances count as misses."""
    by_id: dict[int, InstanceEstimate] = {}
    for est in estimates:
        if est.instance_id not in by_id or (est.result is not None and by_id[est.instance_id].result is None):
            by_id[est.instance_id] = est

    rows = []
    for inst in annotation.instances:
        est = by_id.get(inst.instance_id)
        if est is None or est.result is None:
            rows.append(
                InstanceEvaluation(inst.instance_id, False, False, math.inf, math.inf, math.inf)
            )
            continue
        pose = est.result.pose
        rows.append(
            InstanceEvaluation(
                instance_id=inst.instance_id,
                matched=True,
                accepted=est.accepted,
                rotation_error_deg=rotation_angle_deg(pose.quat, inst.pose.quat),
                translation_error_m=float(np.linalg.norm(pose.t - inst.pose.t)),
                reprojection_error_px=_keypoint_displacement(pose, inst.pose, keypoints3d, camera),
            )
        )
    return aggregate_rows(rows)
