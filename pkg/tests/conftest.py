import numpy as np
import pytest

from dynfusion.geometry import Intrinsics, Pose
from dynfusion.synthetic import Body, SceneScript, default_intrinsics, render_frame
from dynfusion.tsdf import TsdfVolume, VolumeConfig


def plane_depth(k: Intrinsics, z: float) -> np.ndarray:
    return np.full(k.shape, float(z))


@pytest.fixture
def small_k():
    return Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=40.0, width=100, height=80, baseline=0.5)


@pytest.fixture
def oracle_k():
    return default_intrinsics()


@pytest.fixture
def plane_volume(small_k):
    vol = TsdfVolume(VolumeConfig(voxel_size=0.04))
    vol.integrate(plane_depth(small_k, 2.0), None, small_k, Pose.identity())
    return vol


def cuboid_scene(k, center=(0.0, 0.0, 5.0), dims=(1.0, 1.0, 1.0), plane_z=10.0, frames=1, step=(0.0, 0.0, 0.0)):
    """Camera at the origin looking at one cuboid in front of a wall."""
    step = np.asarray(step, dtype=np.float64)
    traj = [Pose(np.eye(3), np.asarray(center, dtype=np.float64) + t * step) for t in range(frames)]
    return SceneScript(
        k,
        [Pose.identity()] * frames,
        [Body(dims, traj)],
        ground_plane=((0.0, 0.0, -1.0), plane_z),
        lidar_pattern=None,
    )


@pytest.fixture
def cuboid_frame(small_k):
    return render_frame(cuboid_scene(small_k), 0)


acceptance_key = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[acceptance_key] = []


@pytest.fixture
def record(request):
    """Record one acceptance verdict line; printed again in the summary."""
    lines = request.config.stash[acceptance_key]

    def _record(number, name, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {name}" + (f" | {detail}" if detail else "")
        print(line)
        lines.append((number, line))
        return passed

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(acceptance_key, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
