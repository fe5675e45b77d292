"""Offline front end: fuse a recorded (or synthetic) sequence and dump
renders plus per-frame statistics.

    blockfusion calib.txt                  # built-in synthetic orbit
    blockfusion calib.txt frames/ -o out   # recorded PPM + PGM pairs
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .integration import SceneParams
from .pipeline import EngineSettings, FusionEngine
from .tracking import TrackerSettings
from .view_io import (CalibrationError, FormatError, FrameSequence, demo_scene,
                      depth_to_disparity, load_calibration, orbit_poses, synth_frame,
                      write_ppm)

log = logging.getLogger("blockfusion")

SYNTHETIC_FRAMES = 60


@dataclass
class CliConfig:
    calibration: Path
    frames_dir: Path = None
    output: Path = Path("output")
    backend: str = "hash"
    swap: bool = False
    tracker: str = "icp"
    voxel_size: float = 0.004
    mu: float = 0.02
    swap_buffer: int = 100
    first: int = None
    last: int = None
    render_stride: int = 10
    strict: bool = False
    voxel_type: str = None


def parse_range(text: str):
    """``a..b`` (inclusive, either end optional) -> (a, b)."""
    if ".." not in text:
        raise argparse.ArgumentTypeError(f"frame range must look like a..b, got {text!r}")
    a, b = text.split("..", 1)
    try:
        lo = int(a) if a else None
        hi = int(b) if b else None
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad frame range {text!r}") from None
    if lo is not None and hi is not None and hi < lo:
        raise argparse.ArgumentTypeError(f"empty frame range {text!r}")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockfusion", description=__doc__.splitlines()[0])
    p.add_argument("calibration", type=Path)
    p.add_argument("frames_dir", type=Path, nargs="?",
                   help="directory of NNNN.ppm / NNNN.pgm pairs (default: synthetic orbit)")
    p.add_argument("-o", "--output", type=Path, default=Path("output"))
    p.add_argument("--backend", choices=("dense", "hash"), default="hash")
    p.add_argument("--swap", choices=("on", "off"), default="off")
    p.add_argument("--tracker", choices=("icp", "color", "icp+ren"), default="icp")
    p.add_argument("--voxel-size", type=float, default=0.004)
    p.add_argument("--mu", type=float, default=0.02)
    p.add_argument("--swap-buffer", type=int, default=100)
    p.add_argument("--frames", type=parse_range, default=(None, None), metavar="A..B")
    p.add_argument("--render-stride", type=int, default=10)
    p.add_argument("--voxel-type", choices=("s", "f", "s_rgb", "f_rgb"), default=None,
                   help="default: s, or s_rgb for the colour tracker")
    p.add_argument("--strict", action="store_true", help="abort on a missing or bad frame")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def config_from_args(args) -> CliConfig:
    return CliConfig(args.calibration, args.frames_dir, args.output, args.backend,
                     args.swap == "on", args.tracker, args.voxel_size, args.mu,
                     args.swap_buffer, args.frames[0], args.frames[1], args.render_stride,
                     args.strict, args.voxel_type)


def _in_range(k: int, cfg: CliConfig) -> bool:
    return (cfg.first is None or k >= cfg.first) and (cfg.last is None or k <= cfg.last)


def synthetic_frames(calib, count: int = SYNTHETIC_FRAMES):
    """Yield (index, rgb, raw disparity) of the built-in orbit sequence."""
    scene = demo_scene()
    intr = calib.depth_intrinsics
    for k, pose in enumerate(orbit_poses(count, arc=np.pi / 3)):
        depth, rgb, _ = synth_frame(scene, pose, intr)
        raw = depth_to_disparity(depth, calib.disparity_a, calib.disparity_b, intr.fx)
        yield k, rgb, raw


def recorded_frames(seq: FrameSequence, cfg: CliConfig):
    """Yield (index, rgb, raw) for paired frames; bad frames yield None data."""
    for k in seq.indices:
        if not _in_range(k, cfg):
            continue
        try:
            rgb, raw = seq.load(k)
        except (OSError, FormatError) as exc:
            yield k, None, exc
            continue
        yield k, rgb, raw


def run(cfg: CliConfig) -> int:
    if not cfg.calibration.is_file():
        log.error("calibration file %s not found", cfg.calibration)
        return 2
    try:
        calib = load_calibration(cfg.calibration)
    except (CalibrationError, OSError) as exc:
        log.error("cannot read calibration: %s", exc)
        return 2
    seq = None
    if cfg.frames_dir is not None:
        if not cfg.frames_dir.is_dir():
            log.error("frames directory %s not found", cfg.frames_dir)
            return 2
        seq = FrameSequence.discover(cfg.frames_dir)
        if seq.rgb_only or seq.depth_only:
            log.warning("unpaired frames: %d rgb-only, %d depth-only",
                        len(seq.rgb_only), len(seq.depth_only))
        if not seq.indices:
            log.error("no frame pairs in %s", cfg.frames_dir)
            return 2
    voxel_type = cfg.voxel_type or ("s_rgb" if cfg.tracker == "color" else "s")
    try:
        settings = EngineSettings(
            backend=cfg.backend, voxel_type=voxel_type, use_swapping=cfg.swap,
            scene=SceneParams(voxel_size=cfg.voxel_size, mu=cfg.mu),
            tracker=TrackerSettings(tracker_type=cfg.tracker), swap_budget=cfg.swap_buffer,
            host_path=str(cfg.output / "host_blocks.bin") if cfg.swap else None)
    except ValueError as exc:
        log.error("invalid settings: %s", exc)
        return 2
    try:
        cfg.output.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log.error("cannot create output directory: %s", exc)
        return 1
    engine = FusionEngine(calib, settings)
    frames = (recorded_frames(seq, cfg) if seq is not None
              else ((k, rgb, raw) for k, rgb, raw in synthetic_frames(calib)
                    if _in_range(k, cfg)))
    processed, failed, skipped = 0, 0, 0
    swaps_in = swaps_out = 0
    t_start = time.perf_counter()
    try:
        with open(cfg.output / "stats.jsonl", "w") as stats_fh, \
                open(cfg.output / "timings.jsonl", "w") as time_fh:
            for k, rgb, raw in frames:
                if rgb is None:
                    log.warning("frame %d unreadable: %s", k, raw)
                    if cfg.strict:
                        return 1
                    skipped += 1
                    continue
                stats = engine.process_frame(raw, rgb)
                rec = stats.record()
                rec["index"] = k
                stats_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                time_fh.write(json.dumps({"index": k, **stats.times}, sort_keys=True) + "\n")
                processed += 1
                failed += stats.status == "failed"
                swaps_in += stats.swapped_in
                swaps_out += stats.swapped_out
                if cfg.render_stride > 0 and stats.frame % cfg.render_stride == 0:
                    img, _ = engine.get_image("raycast")
                    write_ppm(cfg.output / f"render_{k:04d}.ppm", img)
                log.info("frame %d: %s, %d blocks resident", k, stats.status,
                         stats.resident_blocks)
            summary = {"frames": processed, "tracking_failures": failed, "skipped": skipped,
                       "swapped_in": swaps_in, "swapped_out": swaps_out}
            with open(cfg.output / "summary.json", "w") as fh:
                fh.write(json.dumps(summary, sort_keys=True) + "\n")
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 1
    finally:
        if engine.cache is not None:
            engine.cache.host.close()
    elapsed = time.perf_counter() - t_start
    print(f"processed {processed} frames ({failed} tracking failures, {skipped} skipped) "
          f"in {elapsed:.1f} s; output in {cfg.output}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s")
    return run(config_from_args(args))


if __name__ == "__main__":
    sys.exit(main())
