"""Frame-by-frame fusion engine: tracking, allocation, integration, swapping
and raycasting in a fixed order over state objects held by the engine."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import swapping
from .allocation import AllocationScratch, allocate_frame, visible_entries
from .integration import SceneParams, integrate_frame
from .math_core import Intrinsics, Pose
from .raycast import (create_expected_depths, forward_project_points, point_colours,
                      render_image, render_maps)
from .tracking import (TrackerSettings, TrackingResult, TrackingState, build_pyramid,
                       color_track, icp_track, ren_refine)
from .view_io import Calibration, convert_disparity
from .volume_index import DenseArrayIndex, HashParams, make_volume
from .voxel_model import VOXEL_TYPES


@dataclass(frozen=True)
class EngineSettings:
    backend: str = "hash"
    voxel_type: str = "s"
    use_swapping: bool = False
    scene: SceneParams = field(default_factory=SceneParams)
    tracker: TrackerSettings = field(default_factory=TrackerSettings)
    hash_params: HashParams = field(default_factory=HashParams)
    dense_index: DenseArrayIndex = field(default_factory=DenseArrayIndex)
    swap_budget: int = 100
    swap_margin: float = 48.0
    host_path: str = None
    near: float = 0.2
    far: float = 8.0
    point_stride: int = 4

    def __post_init__(self):
        if self.backend not in ("hash", "dense"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.voxel_type not in VOXEL_TYPES:
            raise ValueError(f"unknown voxel type {self.voxel_type!r}")
        if self.backend == "dense" and self.use_swapping:
            raise ValueError("swapping needs the hash backend")
        if self.tracker.tracker_type == "color" and not VOXEL_TYPES[self.voxel_type].has_color_information:
            raise ValueError("the colour tracker needs a voxel type with colour")


@dataclass
class FrameStats:
    frame: int
    status: str
    iterations: int = 0
    allocated: int = 0
    visible: int = 0
    swapped_in: int = 0
    swapped_out: int = 0
    resident_blocks: int = 0
    updated_voxels: int = 0
    pose: list = None
    times: dict = field(default_factory=dict)

    def record(self) -> dict:
        """Deterministic fields only (no timings)."""
        return {k: v for k, v in self.__dict__.items() if k != "times"}


_COLOURMAP = np.array([[0, 0, 128], [0, 0, 255], [0, 255, 255], [255, 255, 0],
                       [255, 0, 0], [128, 0, 0]], dtype=np.float64)


def colourize_depth(depth: np.ndarray, near: float = 0.2, far: float = 4.0) -> np.ndarray:
    """Map depth to a blue-to-red ramp; invalid depths are black."""
    s = np.clip((np.asarray(depth, dtype=np.float64) - near) / (far - near), 0.0, 1.0)
    pos = s * (len(_COLOURMAP) - 1)
    lo = np.minimum(np.floor(pos).astype(int), len(_COLOURMAP) - 2)
    frac = (pos - lo)[..., None]
    rgb = _COLOURMAP[lo] * (1 - frac) + _COLOURMAP[lo + 1] * frac
    rgb[np.asarray(depth) <= 0] = 0
    return np.rint(rgb).astype(np.uint8)


class FusionEngine:
    """Holds the volume and all per-frame state; feed frames in order."""

    def __init__(self, calib: Calibration, settings: EngineSettings = EngineSettings()):
        self.calib = calib
        self.settings = settings
        self.intr: Intrinsics = calib.depth_intrinsics
        self.rgb_intr: Intrinsics = calib.rgb_intrinsics
        self.volume = make_volume(settings.backend, VOXEL_TYPES[settings.voxel_type],
                                  settings.scene.voxel_size, settings.hash_params,
                                  settings.dense_index)
        self.scratch = (AllocationScratch.for_table(self.volume.table)
                        if self.volume.is_hashed else None)
        self.cache = (swapping.GlobalCache.for_volume(self.volume, settings.swap_budget,
                                                      settings.swap_margin,
                                                      settings.host_path)
                      if settings.use_swapping else None)
        self.state = TrackingState()
        self.frame = 0
        self.last_depth = None
        self.last_rgb = None
        self.last_render = None

    # -- helpers ------------------------------------------------------------

    def rgb_pose(self, pose: Pose) -> Pose:
        """World-to-RGB-camera pose for a world-to-depth-camera pose."""
        return self.calib.rgb_to_depth.inverse() @ pose

    def _track(self, depth, rgb) -> TrackingResult:
        ts = self.settings.tracker
        prev = self.state.pose
        if ts.tracker_type == "color":
            if rgb is None or self.state.point_list is None:
                return TrackingResult(prev, False, reason="no colour input")
            pyr = build_pyramid(rgb, ts.num_hierarchy_levels, kind="intensity")
            res = color_track(self.state.point_list, self.state.colour_list, pyr,
                              self.rgb_intr, self.rgb_pose(prev), ts)
            return TrackingResult(self.calib.rgb_to_depth @ res.pose, res.ok,
                                  res.iterations, res.cost, res.reason)
        pyr = build_pyramid(depth, ts.num_hierarchy_levels)
        if ts.tracker_type == "icp":
            return icp_track(pyr, self.intr, self.state, ts, init=prev)
        coarse = icp_track(pyr, self.intr, self.state, ts, init=prev,
                           levels=range(ts.num_hierarchy_levels - 1, 0, -1))
        if not coarse.ok:
            return coarse
        fine = ren_refine(depth, self.intr, self.volume, coarse.pose, ts)
        fine.iterations += coarse.iterations
        return fine

    def _render(self, visible) -> None:
        pose = self.state.pose
        ranges = create_expected_depths(self.volume, visible, pose, self.intr,
                                        near=self.settings.near)
        res = render_maps(self.volume, pose, self.intr, self.settings.scene.mu, ranges)
        self.last_render = res
        self.state.point_map = res.points
        self.state.normal_map = res.normals
        self.state.render_pose = pose
        self.state.render_intr = self.intr
        if self.settings.tracker.tracker_type == "color":
            cols = point_colours(self.volume, res.points)
            self.state.point_list, self.state.colour_list = forward_project_points(
                res, cols, self.settings.point_stride)

    # -- public API ---------------------------------------------------------

    def process_frame(self, raw_disparity: np.ndarray, rgb: np.ndarray = None,
                      pose: Pose = None) -> FrameStats:
        """Run one frame given raw 16-bit disparity (and optional RGB)."""
        t0 = time.perf_counter()
        depth = convert_disparity(raw_disparity, self.calib)
        stats = self.process_depth_frame(depth, rgb, pose)
        stats.times["conversion"] = time.perf_counter() - t0 - sum(stats.times.values())
        return stats

    def process_depth_frame(self, depth: np.ndarray, rgb: np.ndarray = None,
                            pose: Pose = None) -> FrameStats:
        """Run one frame given metric depth in metres (0 = invalid).

        A ``pose`` (world to depth camera) bypasses tracking.
        """
        times = {}
        sp = self.settings.scene
        depth = np.ascontiguousarray(depth, dtype=np.float64)
        if depth.shape != (self.intr.height, self.intr.width):
            raise ValueError(f"depth image is {depth.shape}, calibration expects "
                             f"{(self.intr.height, self.intr.width)}")
        stats = FrameStats(self.frame, "init")

        t = time.perf_counter()
        if pose is not None:
            self.state.pose = pose
            stats.status = "given"
        elif self.frame > 0:
            res = self._track(depth, rgb)
            stats.iterations = res.iterations
            if res.ok:
                self.state.pose = res.pose
                stats.status = "ok"
            else:
                stats.status = "failed"
        times["tracking"] = time.perf_counter() - t
        pose = self.state.pose

        t = time.perf_counter()
        if self.volume.is_hashed:
            stats.allocated, visible = allocate_frame(self.volume, depth, pose, self.intr,
                                                      sp.mu, self.scratch, near=self.settings.near,
                                                      far=self.settings.far)
        else:
            visible = None
        times["allocation"] = time.perf_counter() - t

        t = time.perf_counter()
        use_rgb = rgb is not None and self.volume.storage.has_color
        stats.updated_voxels = integrate_frame(
            self.volume, visible, depth, pose, self.intr, sp,
            rgb=rgb if use_rgb else None, rgb_pose=self.rgb_pose(pose),
            rgb_intr=self.rgb_intr)
        times["integration"] = time.perf_counter() - t

        t = time.perf_counter()
        if self.cache is not None:
            m = swapping.swap_frame(self.volume, self.cache, pose, self.intr, sp.max_weight)
            stats.swapped_in, stats.swapped_out = m.swapped_in, m.swapped_out
        times["swapping"] = time.perf_counter() - t

        t = time.perf_counter()
        if self.volume.is_hashed:
            visible, _ = visible_entries(self.volume, pose, self.intr, near=self.settings.near,
                                         far=self.settings.far)
            stats.visible = len(visible)
            stats.resident_blocks = self.volume.allocated_block_count
        self._render(visible)
        times["raycast"] = time.perf_counter() - t

        self.last_depth = depth
        self.last_rgb = rgb
        stats.pose = [float(v) for v in pose.matrix[:3].ravel()]
        stats.times = times
        self.frame += 1
        return stats

    def flush(self) -> swapping.SwapMetrics:
        """Complete all pending transfers (bring host blocks back)."""
        if self.cache is None:
            return swapping.SwapMetrics()
        return swapping.flush(self.volume, self.cache, self.settings.scene.max_weight)

    def get_image(self, mode: str = "raycast"):
        """(image, ok) for ``raycast``, ``raycast_colour``, ``depth_colourized``
        or ``rgb_passthrough``; ``ok`` is False when nothing is available."""
        blank = np.zeros((self.intr.height, self.intr.width, 3), dtype=np.uint8)
        if mode in ("raycast", "raycast_colour"):
            if self.last_render is None:
                return blank, False
            kind = "shaded" if mode == "raycast" else "colour"
            return render_image(self.volume, self.last_render, self.state.render_pose, kind), True
        if mode == "depth_colourized":
            if self.last_depth is None:
                return blank, False
            return colourize_depth(self.last_depth, self.settings.near), True
        if mode == "rgb_passthrough":
            if self.last_rgb is None:
                return blank, False
            return self.last_rgb, True
        raise ValueError(f"unknown image mode {mode!r}")
