import argparse
import json

import numpy as np
import pytest

from blockfusion.cli import build_parser, config_from_args, main, parse_range
from blockfusion.math_core import Intrinsics, look_at
from blockfusion.view_io import (Calibration, demo_scene, read_ppm_rgb, serialize_calibration,
                                 write_sequence)

TINY = Intrinsics(62.5, 62.5, 39.5, 29.5, 80, 60)
FAST = ["--voxel-size", "0.01", "--mu", "0.04", "-q"]


@pytest.fixture
def calib_file(tmp_path):
    p = tmp_path / "calib.txt"
    p.write_text(serialize_calibration(Calibration.for_camera(TINY)))
    return p


def sequence(directory, n=4):
    poses = [look_at((0.05 * k, 0.8, -1.6), (0.0, 0.3, 0.0)) for k in range(n)]
    write_sequence(directory, demo_scene(), poses, Calibration.for_camera(TINY))


@pytest.mark.parametrize("text,expected", [("3..7", (3, 7)), ("..7", (None, 7)),
                                           ("3..", (3, None)), ("..", (None, None)),
                                           ("5..5", (5, 5))])
def test_parse_range(text, expected):
    assert parse_range(text) == expected


@pytest.mark.parametrize("text", ["3", "a..b", "7..3", "1...2"])
def test_parse_range_rejects(text):
    with pytest.raises(argparse.ArgumentTypeError):
        parse_range(text)


def test_flags_map_to_config(tmp_path):
    args = build_parser().parse_args(
        ["c.txt", "frames", "--backend", "dense", "--swap", "off", "--tracker", "icp+ren",
         "--swap-buffer", "8", "--frames", "2..9", "--render-stride", "3", "--strict"])
    cfg = config_from_args(args)
    assert cfg.backend == "dense" and not cfg.swap and cfg.tracker == "icp+ren"
    assert (cfg.swap_buffer, cfg.first, cfg.last, cfg.render_stride) == (8, 2, 9, 3)
    assert cfg.strict and str(cfg.frames_dir) == "frames"


def test_missing_calibration_exits_without_output(tmp_path):
    out = tmp_path / "out"
    assert main([str(tmp_path / "nope.txt"), "-o", str(out), "-q"]) == 2
    assert not out.exists()


def test_bad_calibration_and_frames_dir(tmp_path, calib_file):
    bad = tmp_path / "bad.txt"
    bad.write_text("640 480\n")
    assert main([str(bad), "-o", str(tmp_path / "o1"), "-q"]) == 2
    assert main([str(calib_file), str(tmp_path / "missing"), "-o", str(tmp_path / "o2"),
                 "-q"]) == 2
    (tmp_path / "empty").mkdir()
    assert main([str(calib_file), str(tmp_path / "empty"), "-o", str(tmp_path / "o3"),
                 "-q"]) == 2


def test_dense_with_swapping_is_rejected(tmp_path, calib_file):
    assert main([str(calib_file), "--backend", "dense", "--swap", "on",
                 "-o", str(tmp_path / "o"), "-q"]) == 2


def test_recorded_run(tmp_path, calib_file):
    frames, out = tmp_path / "frames", tmp_path / "out"
    sequence(frames)
    assert main([str(calib_file), str(frames), "-o", str(out), "--render-stride", "2"]
                + FAST) == 0
    stats = [json.loads(ln) for ln in (out / "stats.jsonl").read_text().splitlines()]
    assert [s["index"] for s in stats] == [0, 1, 2, 3]
    assert stats[0]["status"] == "init"
    assert all(s["status"] == "ok" for s in stats[1:])
    assert "times" not in stats[0]
    assert sorted(p.name for p in out.glob("render_*.ppm")) == ["render_0000.ppm",
                                                                "render_0002.ppm"]
    img = read_ppm_rgb((out / "render_0000.ppm").read_bytes())
    assert img.shape == (60, 80, 3) and img.any()
    summary = json.loads((out / "summary.json").read_text())
    assert summary == {"frames": 4, "tracking_failures": 0, "skipped": 0,
                       "swapped_in": 0, "swapped_out": 0}


def test_frame_range_and_unreadable_frame(tmp_path, calib_file):
    frames, out = tmp_path / "frames", tmp_path / "out"
    sequence(frames)
    (frames / "0002.pgm").write_bytes(b"P5\n80 60\n65535\n")  # truncated pixel data
    assert main([str(calib_file), str(frames), "-o", str(out), "--frames", "1..3"]
                + FAST) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["frames"] == 2 and summary["skipped"] == 1
    assert main([str(calib_file), str(frames), "-o", str(out), "--strict"] + FAST) == 1


def test_synthetic_fallback_with_swapping(tmp_path, calib_file):
    out = tmp_path / "out"
    assert main([str(calib_file), "-o", str(out), "--frames", "..5", "--swap", "on",
                 "--swap-buffer", "8"] + FAST) == 0
    stats = [json.loads(ln) for ln in (out / "stats.jsonl").read_text().splitlines()]
    assert len(stats) == 6
    assert max(max(s["swapped_in"], s["swapped_out"]) for s in stats) <= 8
    assert (out / "host_blocks.bin").is_file()
    assert (out / "render_0000.ppm").is_file()


def test_colour_tracker_run(tmp_path, calib_file):
    frames, out = tmp_path / "frames", tmp_path / "out"
    sequence(frames, n=3)
    assert main([str(calib_file), str(frames), "-o", str(out), "--tracker", "color"]
                + FAST) == 0
    stats = [json.loads(ln) for ln in (out / "stats.jsonl").read_text().splitlines()]
    assert len(stats) == 3
    poses = np.array([s["pose"] for s in stats])
    assert np.isfinite(poses).all()
