"""Input checks shared by the estimator API and the file readers."""

from __future__ import annotations

import numpy as np

from .geometry import Intrinsics, Pose, check_rotation


def check_intrinsics(k) -> Intrinsics:
    if isinstance(k, Intrinsics):
        return k
    if isinstance(k, dict):
        return Intrinsics(**k)
    raise TypeError(f"expected Intrinsics or dict, got {type(k).__name__}")


def check_depth(depth, k: Intrinsics | None = None, name: str = "depth") -> np.ndarray:
    """Float64 copy with every non-finite or non-positive value set to NaN."""
    d = np.array(depth, dtype=np.float64, copy=True)
    if d.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {d.shape}")
    if k is not None and d.shape != k.shape:
        raise ValueError(f"{name} has shape {d.shape}, intrinsics expect {k.shape}")
    d[~(np.isfinite(d) & (d > 0))] = np.nan
    return d


def check_color(color, shape: tuple[int, int]) -> np.ndarray | None:
    if color is None:
        return None
    c = np.asarray(color)
    if c.shape != tuple(shape) + (3,):
        raise ValueError(f"color has shape {c.shape}, expected {tuple(shape) + (3,)}")
    if c.dtype != np.uint8:
        if np.any((c < 0) | (c > 255)):
            raise ValueError("color values must lie in [0, 255]")
        c = c.astype(np.uint8)
    return c


def check_pose(pose) -> Pose:
    if not isinstance(pose, Pose):
        pose = Pose.from_matrix(pose)
    check_rotation(pose.rotation)
    return pose


def check_packet(packet, k: Intrinsics):
    """Validate one frame packet against the camera model."""
    from .dynamic_map import FramePacket

    if not isinstance(packet, FramePacket):
        raise TypeError(f"expected FramePacket, got {type(packet).__name__}")
    check_depth(packet.depth, k)
    check_color(packet.color, k.shape)
    check_pose(packet.camera_pose)
    if packet.lidar_points is not None:
        pts = np.asarray(packet.lidar_points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"lidar points must be (N, 3), got {pts.shape}")
    return packet


def check_packets(packets, k: Intrinsics, after: int | None = None) -> list:
    """Validate a sequence and its strictly increasing frame indices."""
    out = []
    last = after
    for p in packets:
        check_packet(p, k)
        if last is not None and p.frame_index <= last:
            raise ValueError(f"frame indices must increase: {p.frame_index} after {last}")
        last = p.frame_index
        out.append(p)
    return out
