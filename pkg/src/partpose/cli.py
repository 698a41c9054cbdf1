"""Command-line pipeline: generate, estimate, evaluate, label-check.

One flat key-value config file drives a run (see ``DEFAULT_CONFIG`` for the
full key list); seeds are explicit so every command is reproducible, and
per-stage wall-clock timings go to stdout only, never into output files.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .geometry import CameraIntrinsics, KeypointSet3D, Pose, project_points, Z_MIN
from .mesh import TriangleMesh, load_edge_polylines, load_obj, sample_edge_keypoints
from .pipeline import (
    EstimationConfig,
    InstanceEstimate,
    InstanceEvaluation,
    SimulatedDetectorConfig,
    aggregate_rows,
    estimate_scene,
    evaluate,
    load_detections,
    simulate_detections,
)
from .pnp import PnPResult, RansacConfig
from .raster import IndexMask
from .scenes import (
    Scene,
    SceneSpec,
    annotations_equal,
    annotate_scene,
    camera_from_manifest,
    composite_image,
    generate_scene,
    instance_color,
    read_manifest,
    read_scene,
    scene_seed,
    write_dataset,
)


class ConfigError(ValueError):
    """Bad or missing configuration; maps to exit code 1."""


DEFAULT_CONFIG = """\
# partpose run configuration (key = value; '#' starts a comment)

# required paths
mesh = part.obj
edges = part_edges.txt

# camera intrinsics
fx = 500.0
fy = 500.0
cx = 320.0
cy = 240.0
width = 640
height = 480

# scene sampling
scenes = 200
parts_min = 5
parts_max = 6
box_low = -0.18 -0.14 0.55
box_high = 0.18 0.14 0.62
split = 0.9
keypoints = 700
write_images = false

# detector simulation
noise_sigma = 2.0
dropout = 0.1
contamination = 0.1

# solver
ransac_iterations = 500
ransac_threshold = 4.0
ransac_confidence = 0.999
min_sample = 4
accept_threshold = 5.0
candidate_cap = 3
erase_margin = 4

workers = 1
seed = 0
"""


@dataclass(frozen=True)
class RunConfig:
    mesh_path: Path
    edges_path: Path
    camera: CameraIntrinsics
    scenes: int
    parts_min: int
    parts_max: int
    box_low: tuple[float, float, float]
    box_high: tuple[float, float, float]
    split: float
    keypoints: int
    write_images: bool
    detector: SimulatedDetectorConfig
    estimation: EstimationConfig
    workers: int
    seed: int


_KNOWN_KEYS = {
    "mesh",
    "edges",
    "fx",
    "fy",
    "cx",
    "cy",
    "width",
    "height",
    "scenes",
    "parts_min",
    "parts_max",
    "box_low",
    "box_high",
    "split",
    "keypoints",
    "write_images",
    "noise_sigma",
    "dropout",
    "contamination",
    "ransac_iterations",
    "ransac_threshold",
    "ransac_confidence",
    "min_sample",
    "accept_threshold",
    "candidate_cap",
    "erase_margin",
    "workers",
    "seed",
}


def _parse_pairs(path: Path) -> dict[str, str]:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        pairs[key] = value.strip()
    return pairs


def _get(pairs: dict[str, str], key: str, default: str | None = None) -> str:
    if key in pairs:
        return pairs[key]
    if default is None:
        raise ConfigError(f"missing required config key '{key}'")
    return default


def _vec3(text: str, key: str) -> tuple[float, float, float]:
    parts = text.split()
    if len(parts) != 3:
        raise ConfigError(f"config key '{key}' needs 3 numbers")
    return (float(parts[0]), float(parts[1]), float(parts[2]))


def _bool(text: str, key: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"config key '{key}' must be true/false")


def load_config(path: str | Path, seed_override: int | None = None, scenes_override: int | None = None) -> RunConfig:
    base = Path(path).parent
    pairs = _parse_pairs(Path(path))
    try:
        camera = CameraIntrinsics(
            fx=float(_get(pairs, "fx", "500.0")),
            fy=float(_get(pairs, "fy", "500.0")),
            cx=float(_get(pairs, "cx", "320.0")),
            cy=float(_get(pairs, "cy", "240.0")),
            width=int(_get(pairs, "width", "640")),
            height=int(_get(pairs, "height", "480")),
        )
        seed = seed_override if seed_override is not None else int(_get(pairs, "seed"))
        detector = SimulatedDetectorConfig(
            noise_sigma=float(_get(pairs, "noise_sigma", "2.0")),
            dropout=float(_get(pairs, "dropout", "0.1")),
            contamination=float(_get(pairs, "contamination", "0.1")),
            seed=seed,
        )
        estimation = EstimationConfig(
            ransac=RansacConfig(
                max_iterations=int(_get(pairs, "ransac_iterations", "500")),
                inlier_threshold=float(_get(pairs, "ransac_threshold", "4.0")),
                min_sample_size=int(_get(pairs, "min_sample", "4")),
                confidence=float(_get(pairs, "ransac_confidence", "0.999")),
                seed=seed,
            ),
            accept_threshold_px=float(_get(pairs, "accept_threshold", "5.0")),
            candidate_cap=int(_get(pairs, "candidate_cap", "3")),
            erase_margin_px=int(_get(pairs, "erase_margin", "4")),
        )
        config = RunConfig(
            mesh_path=_resolve(base, _get(pairs, "mesh")),
            edges_path=_resolve(base, _get(pairs, "edges")),
            camera=camera,
            scenes=scenes_override if scenes_override is not None else int(_get(pairs, "scenes", "200")),
            parts_min=int(_get(pairs, "parts_min", "5")),
            parts_max=int(_get(pairs, "parts_max", "6")),
            box_low=_vec3(_get(pairs, "box_low", "-0.18 -0.14 0.55"), "box_low"),
            box_high=_vec3(_get(pairs, "box_high", "0.18 0.14 0.62"), "box_high"),
            split=float(_get(pairs, "split", "0.9")),
            keypoints=int(_get(pairs, "keypoints", "700")),
            write_images=_bool(_get(pairs, "write_images", "false"), "write_images"),
            detector=detector,
            estimation=estimation,
            workers=int(_get(pairs, "workers", "1")),
            seed=seed,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    if not config.mesh_path.exists():
        raise ConfigError(f"mesh not found: {config.mesh_path}")
    if not config.edges_path.exists():
        raise ConfigError(f"edge polylines not found: {config.edges_path}")
    if config.scenes < 1:
        raise ConfigError("scenes must be at least 1")
    if not (0.0 < config.split <= 1.0):
        raise ConfigError("split must lie in (0, 1]")
    if config.workers < 1:
        raise ConfigError("workers must be at least 1")
    return config


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else (base / p)


def _load_part(config: RunConfig) -> tuple[TriangleMesh, list[np.ndarray], KeypointSet3D]:
    mesh = load_obj(config.mesh_path)
    polylines = load_edge_polylines(config.edges_path)
    keypoints = sample_edge_keypoints(mesh, polylines, config.keypoints)
    return mesh, polylines, keypoints


def _scene_spec(config: RunConfig) -> SceneSpec:
    mesh = load_obj(config.mesh_path)
    return SceneSpec(
        camera=config.camera,
        box_low=np.array(config.box_low),
        box_high=np.array(config.box_high),
        collision_radius=mesh.bounding_radius(),
        parts_min=config.parts_min,
        parts_max=config.parts_max,
        seed=config.seed,
    )


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _generate_one(args: tuple) -> Scene:
    spec, mesh, keypoints, index = args
    per_scene = replace(spec, seed=scene_seed(spec.seed, index))
    return Scene(f"{index:04d}", generate_scene(per_scene, mesh, keypoints))


def cmd_generate(config: RunConfig, out_dir: Path) -> int:
    started = time.perf_counter()
    mesh, _, keypoints = _load_part(config)
    spec = _scene_spec(config)

    jobs = [(spec, mesh, keypoints, i) for i in range(config.scenes)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            scenes = list(pool.map(_generate_one, jobs))
    else:
        scenes = [_generate_one(job) for job in jobs]
    synth_time = time.perf_counter() - started

    write_start = time.perf_counter()
    manifest = write_dataset(
        scenes,
        out_dir,
        camera=config.camera,
        seed=config.seed,
        split_fraction=config.split,
        extra={
            "mesh": str(config.mesh_path),
            "edges": str(config.edges_path),
            "keypoints": config.keypoints,
            "parts": [config.parts_min, config.parts_max],
            "box_low": list(config.box_low),
            "box_high": list(config.box_high),
        },
        write_images=config.write_images,
    )
    write_time = time.perf_counter() - write_start

    print(f"manifest: {out_dir / 'manifest'}")
    print(
        f"scenes: {manifest['counts']['total']} "
        f"(train {manifest['counts']['train']} / test {manifest['counts']['test']})"
    )
    print(f"[time] synthesize+annotate: {synth_time:.2f}s  write: {write_time:.2f}s")
    return 0


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _pose_dict(pose: Pose) -> dict:
    return {
        "quat_wxyz": [float(x) for x in pose.quat],
        "t_xyz": [float(x) for x in pose.t],
    }


def _estimate_record(est: InstanceEstimate) -> dict:
    rec: dict = {
        "instance_id": est.instance_id,
        "accepted": est.accepted,
        "error_px": est.error if math.isfinite(est.error) else None,
    }
    if est.result is not None:
        rec["pose"] = _pose_dict(est.result.pose)
        rec["num_inliers"] = int(len(est.result.inlier_indices))
        rec["ransac_iterations"] = est.result.ransac_iterations
        rec["refine_iterations"] = est.result.refine_iterations
    else:
        rec["pose"] = None
        rec["num_inliers"] = 0
    return rec


def _draw_overlay(
    index_mask: IndexMask,
    estimates: list[InstanceEstimate],
    mesh: TriangleMesh,
    polylines: list[np.ndarray],
    camera: CameraIntrinsics,
) -> Image.Image:
    image = Image.fromarray(composite_image(index_mask), mode="RGB")
    draw = ImageDraw.Draw(image)
    for est in estimates:
        if est.result is None or not est.accepted:
            continue
        color = tuple(min(255, c + 40) for c in instance_color(est.instance_id))
        for poly in polylines:
            uv, z = project_points(camera, est.result.pose, mesh.vertices[poly])
            for a, b in zip(range(len(poly) - 1), range(1, len(poly))):
                if z[a] <= Z_MIN or z[b] <= Z_MIN:
                    continue
                draw.line(
                    [tuple(uv[a]), tuple(uv[b])],
                    fill=color,
                    width=1,
                )
    return image


def _estimate_one(args: tuple) -> tuple[str, list[InstanceEstimate], list[InstanceEvaluation]]:
    (scene_id, index, dataset, mesh, keypoints, camera, detector, estimation, detections_dir) = args
    annotation = read_scene(dataset, scene_id)
    if detections_dir is not None:
        regions = load_detections(Path(detections_dir) / f"{scene_id}.json")
    else:
        per_scene = replace(detector, seed=scene_seed(detector.seed, index, stream=1))
        regions = simulate_detections(annotation, per_scene)
    estimates = estimate_scene(regions, mesh, keypoints, camera, estimation)
    report = evaluate(estimates, annotation, keypoints, camera)
    return scene_id, estimates, list(report.per_instance)


def cmd_estimate(
    config: RunConfig, dataset: Path, out_dir: Path, detections_dir: Path | None = None
) -> int:
    manifest = read_manifest(dataset)
    camera = camera_from_manifest(manifest)
    mesh, polylines, keypoints = _load_part(config)
    scene_ids = sorted(rec["id"] for rec in manifest["scenes"])

    solve_start = time.perf_counter()
    jobs = [
        (sid, i, dataset, mesh, keypoints, camera, config.detector, config.estimation, detections_dir)
        for i, sid in enumerate(scene_ids)
    ]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_estimate_one, jobs))
    else:
        results = [_estimate_one(job) for job in jobs]
    solve_time = time.perf_counter() - solve_start

    out_dir.mkdir(parents=True, exist_ok=True)
    overlay_dir = out_dir / "overlays"
    overlay_dir.mkdir(exist_ok=True)

    write_start = time.perf_counter()
    scenes_payload = {}
    accepted = 0
    total = 0
    for scene_id, estimates, _rows in results:
        scenes_payload[scene_id] = [_estimate_record(e) for e in estimates]
        accepted += sum(1 for e in estimates if e.accepted)
        total += len(estimates)
        annotation = read_scene(dataset, scene_id)
        overlay = _draw_overlay(annotation.index_mask, estimates, mesh, polylines, camera)
        overlay.save(overlay_dir / f"{scene_id}.png", format="PNG")

    payload = {
        "seed": config.seed,
        "detector": {
            "noise_sigma": config.detector.noise_sigma,
            "dropout": config.detector.dropout,
            "contamination": config.detector.contamination,
        },
        "solver": {
            "ransac_iterations": config.estimation.ransac.max_iterations,
            "ransac_threshold": config.estimation.ransac.inlier_threshold,
            "ransac_confidence": config.estimation.ransac.confidence,
            "accept_threshold": config.estimation.accept_threshold_px,
            "candidate_cap": config.estimation.candidate_cap,
            "erase_margin": config.estimation.erase_margin_px,
        },
        "scenes": scenes_payload,
    }
    estimates_path = out_dir / "estimates.json"
    estimates_path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    write_time = time.perf_counter() - write_start

    rate = accepted / total if total else 0.0
    print(f"estimates: {estimates_path}")
    print(f"instances: {total}  accepted: {accepted}  acceptance rate: {rate:.1%}")
    print(f"[time] detect+solve: {solve_time:.2f}s  write: {write_time:.2f}s")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _finite_or_none(x: float) -> float | None:
    return x if math.isfinite(x) else None


def cmd_evaluate(config: RunConfig, estimates_path: Path, dataset: Path, out_path: Path) -> int:
    if not estimates_path.exists():
        raise FileNotFoundError(f"estimates file not found: {estimates_path}")
    manifest = read_manifest(dataset)
    camera = camera_from_manifest(manifest)
    _, _, keypoints = _load_part(config)
    payload = json.loads(estimates_path.read_text())
    if "scenes" not in payload:
        raise ValueError("estimates file missing required field 'scenes'")

    eval_start = time.perf_counter()
    scene_reports: dict[str, dict] = {}
    all_rows: list[InstanceEvaluation] = []
    gt_total = 0
    for rec in sorted(manifest["scenes"], key=lambda r: r["id"]):
        scene_id = rec["id"]
        annotation = read_scene(dataset, scene_id)
        gt_total += len(annotation.instances)
        estimates = _estimates_from_records(payload["scenes"].get(scene_id, []))
        report = evaluate(estimates, annotation, keypoints, camera)
        all_rows.extend(report.per_instance)
        scene_reports[scene_id] = _sanitize(report.to_dict())
    overall = aggregate_rows(all_rows)
    eval_time = time.perf_counter() - eval_start

    metrics = {
        "overall": _sanitize(overall.to_dict()),
        "scenes": scene_reports,
    }
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n")

    print(f"metrics: {out_path}")
    print(_format_table(overall, gt_total))
    print(f"[time] evaluate: {eval_time:.2f}s")
    return 0


def _estimates_from_records(records: list[dict]) -> list[InstanceEstimate]:
    estimates = []
    for rec in records:
        if rec.get("pose") is None:
            estimates.append(
                InstanceEstimate(int(rec["instance_id"]), None, False, math.inf)
            )
            continue
        pose = Pose(
            np.array(rec["pose"]["quat_wxyz"], dtype=np.float64),
            np.array(rec["pose"]["t_xyz"], dtype=np.float64),
        )
        error = rec["error_px"] if rec.get("error_px") is not None else math.inf
        result = PnPResult(
            pose=pose,
            inlier_indices=np.arange(int(rec.get("num_inliers", 0))),
            inlier_semantic_ids=frozenset(),
            error=error,
            ransac_iterations=int(rec.get("ransac_iterations", 0)),
            refine_iterations=int(rec.get("refine_iterations", 0)),
        )
        estimates.append(
            InstanceEstimate(int(rec["instance_id"]), result, bool(rec["accepted"]), error)
        )
    return estimates


def _sanitize(value):
    if isinstance(value, dict):
        return {k: _sanitize(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_sanitize(v) for v in value]
    if isinstance(value, float):
        return _finite_or_none(value)
    return value


def _format_table(report, gt_total: int) -> str:
    lines = [
        "metric                        value",
        "----------------------------  ----------",
        f"instances                     {gt_total}",
        f"misses                        {report.misses}",
        f"acceptance rate               {report.acceptance_rate:.1%}",
        f"mean rotation error (deg)     {report.mean_rotation_deg:.4f}",
        f"median rotation error (deg)   {report.median_rotation_deg:.4f}",
        f"mean translation error (m)    {report.mean_translation_m:.6f}",
        f"median translation error (m)  {report.median_translation_m:.6f}",
        f"within 5 deg / 5 cm           {report.within_5deg_5cm:.1%}",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# label-check
# ---------------------------------------------------------------------------

def cmd_label_check(dataset: Path) -> int:
    manifest = read_manifest(dataset)
    camera = camera_from_manifest(manifest)
    mesh = load_obj(manifest["mesh"])
    polylines = load_edge_polylines(manifest["edges"])
    keypoints = sample_edge_keypoints(mesh, polylines, int(manifest["keypoints"]))

    start = time.perf_counter()
    failures = 0
    for rec in sorted(manifest["scenes"], key=lambda r: r["id"]):
        scene_id = rec["id"]
        stored = read_scene(dataset, scene_id)
        poses = [(inst.instance_id, inst.pose) for inst in stored.instances]
        rebuilt = annotate_scene(poses, mesh, keypoints, camera)
        if annotations_equal(stored, rebuilt):
            print(f"scene {scene_id}: OK")
        else:
            print(f"scene {scene_id}: MISMATCH")
            failures += 1
    elapsed = time.perf_counter() - start
    print(f"[time] label-check: {elapsed:.2f}s")
    if failures:
        raise RuntimeError(f"{failures} scene(s) failed re-rasterization check")
    print(f"label-check passed for {len(manifest['scenes'])} scene(s)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit code 1 instead of argparse's 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="partpose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="synthesize a labeled dataset")
    gen.add_argument("--config", required=True, type=Path)
    gen.add_argument("--out", required=True, type=Path)
    gen.add_argument("--scenes", type=int, default=None)
    gen.add_argument("--seed", type=int, default=None)

    est = sub.add_parser("estimate", help="detect and solve poses over a dataset")
    est.add_argument("--config", required=True, type=Path)
    est.add_argument("--dataset", required=True, type=Path)
    est.add_argument("--out", required=True, type=Path)
    est.add_argument("--seed", type=int, default=None)
    est.add_argument(
        "--detections",
        type=Path,
        default=None,
        help="directory of per-scene detection files to use instead of the simulator",
    )

    ev = sub.add_parser("evaluate", help="score an estimates file against ground truth")
    ev.add_argument("--config", required=True, type=Path)
    ev.add_argument("--estimates", required=True, type=Path)
    ev.add_argument("--dataset", required=True, type=Path)
    ev.add_argument("--out", type=Path, default=None)

    chk = sub.add_parser("label-check", help="re-verify dataset annotations by re-rasterizing")
    chk.add_argument("--dataset", required=True, type=Path)

    init = sub.add_parser("init-config", help="write a template config file")
    init.add_argument("--out", required=True, type=Path)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "init-config":
            args.out.write_text(DEFAULT_CONFIG)
            print(f"wrote {args.out}")
            return 0
        if args.command == "generate":
            config = load_config(args.config, seed_override=args.seed, scenes_override=args.scenes)
            return cmd_generate(config, args.out)
        if args.command == "estimate":
            config = load_config(args.config, seed_override=args.seed)
            if not args.dataset.exists():
                raise FileNotFoundError(f"dataset not found: {args.dataset}")
            return cmd_estimate(config, args.dataset, args.out, args.detections)
        if args.command == "evaluate":
            config = load_config(args.config)
            out = args.out if args.out is not None else args.estimates.parent / "metrics.json"
            return cmd_evaluate(config, args.estimates, args.dataset, out)
        if args.command == "label-check":
            if not args.dataset.exists():
                raise FileNotFoundError(f"dataset not found: {args.dataset}")
            return cmd_label_check(args.dataset)
        raise _UsageError(f"unknown command {args.command}")
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
