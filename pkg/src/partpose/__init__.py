"""Synthetic auto-labeled scenes and keypoint-based 6D pose recovery.

The package covers the full loop for clustered texture-less parts: render
CAD meshes into exact masks and keypoint annotations, simulate a keypoint
detector over those labels, and recover per-instance poses with RANSAC-robust
confidence-weighted PnP, including reprojection-error disambiguation for
mixed regions and occlusion-aware sequential estimation.
"""

from .geometry import (
    CameraIntrinsics,
    Correspondence,
    KeypointSet3D,
    Pose,
    compose,
    inverse,
    project,
    project_points,
    reprojection_error,
    rotation_angle_deg,
    transform,
)
from .mesh import (
    TriangleMesh,
    load_edge_polylines,
    load_obj,
    make_bracket,
    sample_edge_keypoints,
    save_edge_polylines,
    save_obj,
)
from .pipeline import (
    EstimationConfig,
    InstanceEstimate,
    KeypointDetection,
    RegionDetection,
    SimulatedDetectorConfig,
    cluster_and_select,
    estimate_scene,
    evaluate,
    load_detections,
    save_detections,
    simulate_detections,
)
from .pnp import (
    DegenerateConfiguration,
    InsufficientCorrespondences,
    NoConsensus,
    PnPResult,
    PoseEstimationError,
    RansacConfig,
    RefineResult,
    refine_pose,
    solve_pnp_linear,
    solve_pnp_ransac,
    solve_with_edge_subset,
)
from .raster import (
    DepthBuffer,
    IndexMask,
    compose_index_mask,
    erase_instance,
    mask_from_silhouette,
    rasterize,
    render_heatmaps,
    visible_keypoints,
)
from .scenes import (
    Scene,
    SceneAnnotation,
    ScenePlacementError,
    SceneSpec,
    annotate_scene,
    generate_scene,
    generate_scenes,
    read_manifest,
    read_scene,
    sample_scene,
    write_dataset,
)

__all__ = [
    "CameraIntrinsics",
    "Correspondence",
    "DegenerateConfiguration",
    "DepthBuffer",
    "EstimationConfig",
    "IndexMask",
    "InstanceEstimate",
    "InsufficientCorrespondences",
    "KeypointDetection",
    "KeypointSet3D",
    "NoConsensus",
    "PnPResult",
    "Pose",
    "PoseEstimationError",
    "RansacConfig",
    "RefineResult",
    "RegionDetection",
    "Scene",
    "SceneAnnotation",
    "ScenePlacementError",
    "SceneSpec",
    "SimulatedDetectorConfig",
    "TriangleMesh",
    "annotate_scene",
    "cluster_and_select",
    "compose",
    "compose_index_mask",
    "erase_instance",
    "estimate_scene",
    "evaluate",
    "generate_scene",
    "generate_scenes",
    "inverse",
    "load_detections",
    "load_edge_polylines",
    "load_obj",
    "make_bracket",
    "mask_from_silhouette",
    "project",
    "project_points",
    "rasterize",
    "read_manifest",
    "read_scene",
    "refine_pose",
    "render_heatmaps",
    "reprojection_error",
    "rotation_angle_deg",
    "sample_edge_keypoints",
    "sample_scene",
    "save_detections",
    "save_edge_polylines",
    "save_obj",
    "simulate_detections",
    "solve_pnp_linear",
    "solve_pnp_ransac",
    "solve_with_edge_subset",
    "transform",
    "visible_keypoints",
    "write_dataset",
]

__version__ = "0.1.0"
