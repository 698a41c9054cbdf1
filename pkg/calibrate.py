"""Development-time calibration runs; not part of the package or test suite."""

import numpy as np

import sys
sys.path.insert(0, "tests")
import support

import partpose as pp
from partpose.geometry import random_rotation, rotation_angle_deg


def calibrate_noise_robustness():
    """sigma=2 px noise on 700 keypoints: distribution of pose errors."""
    cam = pp.CameraIntrinsics(500, 500, 320, 240, 640, 480)
    mesh, polys = pp.make_bracket()
    kps = pp.sample_edge_keypoints(mesh, polys, 700)
    rots, trans_rel = [], []
    for seed in range(50):
        rng = np.random.default_rng(9000 + seed)
        pose = support.random_pose(rng)
        uv, _ = pp.project_points(cam, pose, kps.positions)
        noise = rng.normal(0, 2.0, size=uv.shape)
        d = np.exp(-(noise**2).sum(axis=1) / 8.0)
        corrs = [pp.Correspondence(i, kps.positions[i], uv[i] + noise[i], float(d[i])) for i in range(700)]
        res = pp.solve_pnp_ransac(corrs, cam, pp.RansacConfig(seed=seed))
        rots.append(rotation_angle_deg(res.pose.quat, pose.quat))
        trans_rel.append(np.linalg.norm(res.pose.t - pose.t) / pose.t[2])
    rots, trans_rel = np.array(rots), np.array(trans_rel)
    print(f"noise: rot median {np.median(rots):.4f} deg, max {rots.max():.4f}")
    print(f"noise: trans/depth median {np.median(trans_rel)*100:.4f} %, max {trans_rel.max()*100:.4f} %")


def calibrate_edge_corruption(delta_deg=6.0, clean_sigma=0.5, clean_w=(0.4, 0.7), threshold=4.0, edge=0):
    """Coherent corruption of one edge: pose drift with vs without exclusion."""
    cam = pp.CameraIntrinsics(500, 500, 320, 240, 640, 480)
    mesh, polys = pp.make_bracket()
    kps = pp.sample_edge_keypoints(mesh, polys, 700)
    bad_rot, good_rot = [], []
    for seed in range(10):
        rng = np.random.default_rng(500 + seed)
        pose = support.random_pose(rng)
        phantom = pose.compose(pp.Pose(pp.geometry.quat_from_axis_angle(np.array([0, 0, np.radians(delta_deg)])), np.zeros(3)))
        uv_true, _ = pp.project_points(cam, pose, kps.positions)
        uv_phantom, _ = pp.project_points(cam, phantom, kps.positions)
        corrupted = kps.edge_ids == edge
        corrs = []
        for i in range(700):
            if corrupted[i]:
                corrs.append(pp.Correspondence(i, kps.positions[i], uv_phantom[i], 1.0))
            else:
                w = rng.uniform(*clean_w)
                corrs.append(pp.Correspondence(i, kps.positions[i] , uv_true[i] + rng.normal(0, clean_sigma, 2), w))
        cfg = pp.RansacConfig(seed=seed, inlier_threshold=threshold)
        res_all = pp.solve_pnp_ransac(corrs, cam, cfg)
        res_excl = pp.solve_with_edge_subset(corrs, kps, [edge], cam, cfg)
        bad_rot.append(rotation_angle_deg(res_all.pose.quat, pose.quat))
        good_rot.append(rotation_angle_deg(res_excl.pose.quat, pose.quat))
        # typical pixel shift of the corrupted edge
        if seed == 0:
            shift = np.linalg.norm(uv_phantom[corrupted] - uv_true[corrupted], axis=1)
            print(f"  corruption pixel shift: min {shift.min():.2f} max {shift.max():.2f}")
    print(f"edge corruption delta={delta_deg} thr={threshold}: without exclusion rot {np.min(bad_rot):.3f}..{np.max(bad_rot):.3f}")
    print(f"edge corruption: with exclusion rot max {np.max(good_rot):.4f}")


def overlap_scene(offset=(0.011, 0.011)):
    cam = pp.CameraIntrinsics(500, 500, 320, 240, 640, 480)
    mesh, polys = pp.make_bracket()
    kps = pp.sample_edge_keypoints(mesh, polys, 700)
    pose_a = pp.Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 0.55]))
    pose_b = pp.Pose(np.array([1.0, 0, 0, 0]), np.array([offset[0], offset[1], 0.62]))
    ann = pp.annotate_scene([(1, pose_a), (2, pose_b)], mesh, kps, cam)
    return cam, mesh, kps, ann


def estimate_without_erasure(regions, mesh, kps, cam, cfg):
    import partpose.pipeline as pl

    order = sorted(range(len(regions)), key=lambda i: (-regions[i].score, i))
    out = []
    for idx in order:
        region = regions[idx]
        iid = region.instance_id if region.instance_id is not None else idx + 1
        cands = pl._cluster_candidates(region.keypoints, kps, cam, cfg, iid)
        out.append(cands[0] if cands else pl.InstanceEstimate(iid, None, False, float("inf")))
    return out


def calibrate_overlap_scenario(seed=0, contamination=0.3):
    """Front part A occluding most of rear part B, mutual keypoint leakage."""
    cam, mesh, kps, ann = overlap_scene()
    for inst in ann.instances:
        print(f"  inst {inst.instance_id}: visible kps={len(inst.keypoint_ids)} visibility={inst.visibility:.2f}")
    det_cfg = pp.SimulatedDetectorConfig(noise_sigma=2.0, dropout=0.1, contamination=contamination, seed=seed)
    regions = pp.simulate_detections(ann, det_cfg)
    gt = {i.instance_id: set(i.keypoint_ids.tolist()) for i in ann.instances}
    for r in regions:
        own = sum(1 for k in r.keypoints if k.semantic_id in gt[r.instance_id])
        print(f"  region inst={r.instance_id} score={r.score:.2f} kps={len(r.keypoints)} (~own {own})")
    est_cfg = pp.EstimationConfig(ransac=pp.RansacConfig(seed=seed))
    with_erase = pp.estimate_scene(regions, mesh, kps, cam, est_cfg)
    ablation = estimate_without_erasure(regions, mesh, kps, cam, est_cfg)
    poses = {i.instance_id: i.pose for i in ann.instances}
    for label, ests in (("with erasure", with_erase), ("ablation   ", ablation)):
        desc = []
        for e in sorted(ests, key=lambda e: e.instance_id):
            if e.result is None:
                desc.append(f"id{e.instance_id}: none")
                continue
            ra = rotation_angle_deg(e.result.pose.quat, poses[1].quat)
            rb = rotation_angle_deg(e.result.pose.quat, poses[2].quat)
            desc.append(
                f"id{e.instance_id}: err={e.error:.2f}px inl={len(e.result.inlier_indices)} rotA={ra:.2f} rotB={rb:.2f}"
            )
        print(f"  {label}: " + " | ".join(desc))


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "all"
    if which in ("noise", "all"):
        calibrate_noise_robustness()
    if which in ("edge", "all"):
        calibrate_edge_corruption()
    if which in ("overlap", "all"):
        for s in range(5):
            print(f"overlap seed {s}")
            calibrate_overlap_scenario(seed=s)
