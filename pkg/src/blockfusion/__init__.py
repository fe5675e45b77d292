"""TSDF depth fusion with dense and voxel-block-hash volumes."""
from .integration import SceneParams
from .math_core import Intrinsics, Pose
from .pipeline import EngineSettings, FrameStats, FusionEngine
from .tracking import TrackerSettings
from .view_io import Calibration, load_calibration, parse_calibration

__all__ = ["Calibration", "EngineSettings", "FrameStats", "FusionEngine", "Intrinsics",
           "Pose", "SceneParams", "TrackerSettings", "load_calibration",
           "parse_calibration"]
