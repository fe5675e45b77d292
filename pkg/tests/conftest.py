import time

import numpy as np
import pytest

from blockfusion.allocation import AllocationScratch, allocate_frame
from blockfusion.integration import SceneParams, integrate_frame
from blockfusion.math_core import Intrinsics
from blockfusion.view_io import demo_scene, orbit_poses, synth_frame
from blockfusion.volume_index import HashParams, HashVolume

# small tables keep the per-test setup cheap
SMALL_HASH = HashParams(bucket_count=2 ** 14, bucket_size=2, excess_count=2 ** 12,
                        vba_blocks=2 ** 14)


@pytest.fixture
def small_intr():
    return Intrinsics(125.0, 125.0, 79.5, 59.5, 160, 120)


@pytest.fixture(scope="session")
def demo_intr():
    return Intrinsics(250.0, 250.0, 159.5, 119.5, 320, 240)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class FusedScene:
    """The 60-frame ground-truth orbit of the demo scene, fused once."""

    def __init__(self, intr, frames=60):
        self.intr = intr
        self.scene = demo_scene()
        self.poses = orbit_poses(frames)
        self.params = SceneParams(voxel_size=0.004, mu=0.02)
        self.volume = HashVolume(voxel_size=self.params.voxel_size)
        scratch = AllocationScratch.for_table(self.volume.table)
        t0 = time.perf_counter()
        for pose in self.poses:
            depth, _, _ = synth_frame(self.scene, pose, intr)
            _, vis = allocate_frame(self.volume, depth, pose, intr, self.params.mu, scratch)
            integrate_frame(self.volume, vis, depth, pose, intr, self.params)
        self.seconds = time.perf_counter() - t0


@pytest.fixture(scope="session")
def fused_demo(demo_intr):
    return FusedScene(demo_intr)


# acceptance reporting: one line per criterion at the end of the run

_VERDICTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _VERDICTS[number] = (report.passed, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        ok, title, detail = _VERDICTS[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
