"""Fuse the demo orbit at ground-truth poses and report surface error,
raycast agreement and ICP recovery rate.

    python3 scripts/run_sphere_orbit.py --frames 60 --trials 20
"""
import argparse
import time

import numpy as np

from blockfusion.allocation import AllocationScratch, allocate_frame, visible_entries
from blockfusion.integration import SceneParams, integrate_frame
from blockfusion.math_core import Intrinsics, rotation_angle
from blockfusion.raycast import create_expected_depths, hit_depths, naive_raycast, render_maps
from blockfusion.tracking import TrackerSettings, TrackingState, build_pyramid, icp_track, perturb
from blockfusion.view_io import demo_scene, orbit_poses, synth_frame
from blockfusion.volume_index import HashVolume


def fuse(scene, poses, intr, params):
    vol = HashVolume(voxel_size=params.voxel_size)
    scratch = AllocationScratch.for_table(vol.table)
    for pose in poses:
        depth = synth_frame(scene, pose, intr)[0]
        _, vis = allocate_frame(vol, depth, pose, intr, params.mu, scratch)
        integrate_frame(vol, vis, depth, pose, intr, params)
    return vol


def surface_rms(vol, scene, poses, intr, mu):
    big = scene[0]
    errs = []
    for pose in poses:
        res = render_maps(vol, pose, intr, mu)
        pts = res.points[..., :3][res.valid]
        d = np.stack([np.abs(p.distance(pts)) for p in scene])
        errs.append(big.distance(pts[d.argmin(axis=0) == 0]))
    e = np.concatenate(errs)
    return float(np.sqrt(np.mean(e ** 2))), len(e)


def raycast_agreement(vol, poses, intr, mu):
    agree = total = 0
    for pose in poses:
        vis, _ = visible_entries(vol, pose, intr)
        ranges = create_expected_depths(vol, vis, pose, intr)
        z = hit_depths(render_maps(vol, pose, intr, mu, ranges), pose)
        zn = naive_raycast(vol, pose, intr, 0.2, 4.0)
        agree += int(((z > 0) == (zn > 0)).sum())
        total += z.size
    return agree / total


def icp_recovery(vol, scene, poses, intr, mu, trials, rng):
    settings = TrackerSettings()
    good = 0
    for k in range(trials):
        truth = poses[k % len(poses)]
        res = render_maps(vol, truth, intr, mu)
        state = TrackingState(truth, res.points, res.normals, truth, intr)
        depth = synth_frame(scene, truth, intr)[0]
        axis = rng.normal(size=3)
        axis *= np.radians(rng.uniform(0, 2)) / np.linalg.norm(axis)
        shift = rng.normal(size=3)
        shift *= rng.uniform(0, 0.02) / np.linalg.norm(shift)
        out = icp_track(build_pyramid(depth, settings.num_hierarchy_levels), intr, state,
                        settings, init=perturb(truth, np.r_[axis, shift]))
        ang = np.degrees(rotation_angle(out.pose.rotation @ truth.rotation.T))
        good += out.ok and ang < 0.1 and np.linalg.norm(out.pose.centre - truth.centre) < 1e-3
    return good


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--voxel-size", type=float, default=0.004)
    p.add_argument("--mu", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    intr = Intrinsics(250.0, 250.0, 159.5, 119.5, 320, 240)
    small = Intrinsics(125.0, 125.0, 79.5, 59.5, 160, 120)
    params = SceneParams(voxel_size=args.voxel_size, mu=args.mu)
    scene, poses = demo_scene(), orbit_poses(args.frames)

    t0 = time.perf_counter()
    vol = fuse(scene, poses, intr, params)
    print(f"fused {args.frames} frames in {time.perf_counter() - t0:.1f} s, "
          f"{vol.allocated_block_count} blocks")
    sample = poses[::max(1, len(poses) // 6)]
    rms, hits = surface_rms(vol, scene, sample, intr, params.mu)
    print(f"surface RMS {rms * 1000:.2f} mm over {hits} hits")
    print(f"raycast agreement {raycast_agreement(vol, sample, small, params.mu):.5f}")
    good = icp_recovery(vol, scene, poses, intr, params.mu, args.trials,
                        np.random.default_rng(args.seed))
    print(f"ICP recovered {good}/{args.trials} perturbations")


if __name__ == "__main__":
    main()
