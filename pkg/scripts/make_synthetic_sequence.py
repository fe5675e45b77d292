"""Render a synthetic RGB + disparity sequence that the CLI can replay.

    python3 scripts/make_synthetic_sequence.py out/seq --frames 60
    blockfusion out/seq/calib.txt out/seq/frames -o out/run
"""
import argparse
from pathlib import Path

import numpy as np

from blockfusion.math_core import Intrinsics
from blockfusion.view_io import (Calibration, demo_scene, orbit_poses, pan_poses, ring_scene,
                                 serialize_calibration, write_sequence)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("output", type=Path)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--scene", choices=("orbit", "ring"), default="orbit",
                   help="demo orbit, or a panning camera inside a ring of spheres")
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    args = p.parse_args()

    f = 250.0 * args.width / 320
    intr = Intrinsics(f, f, (args.width - 1) / 2, (args.height - 1) / 2, args.width,
                      args.height)
    calib = Calibration.for_camera(intr)
    if args.scene == "orbit":
        scene, poses = demo_scene(), orbit_poses(args.frames, arc=np.pi / 2)
    else:
        scene, poses = ring_scene(6, ball=0.12), pan_poses(args.frames, arc=2.6 * np.pi)
    args.output.mkdir(parents=True, exist_ok=True)
    (args.output / "calib.txt").write_text(serialize_calibration(calib))
    write_sequence(args.output / "frames", scene, poses, calib)
    with open(args.output / "poses.txt", "w") as fh:
        for pose in poses:
            fh.write(" ".join(f"{v:.9f}" for v in pose.matrix[:3].ravel()) + "\n")
    print(f"wrote {len(poses)} frames to {args.output}")


if __name__ == "__main__":
    main()
