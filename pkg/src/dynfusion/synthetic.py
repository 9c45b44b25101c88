"""Analytic cuboid-and-plane scenes with exact ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .decomposition import Detection
from .dynamic_map import FramePacket
from .geometry import Box2, Intrinsics, OrientedBox3, Pose, normalize_angle, pixel_rays, yaw_rotation

PLANE_LABEL = -1
NO_HIT = -2


class UnsupportedOrientationError(ValueError):
    """Body is not yaw-only with respect to the camera up axis."""


@dataclass(frozen=True)
class Body:
    """Cuboid with dims (length along x, width along z, height along y)."""

    dims: tuple
    trajectory: list  # world pose (body-to-world) per frame
    color: tuple = (200, 40, 40)
    class_label: str = "car"

    def __post_init__(self):
        if not all(d > 0 for d in self.dims):
            raise ValueError("body dims must be positive")

    @property
    def half_extents(self) -> np.ndarray:
        l, w, h = self.dims
        return np.array([l, h, w], dtype=np.float64) / 2.0


@dataclass(frozen=True)
class LidarPattern:
    """Angular sampling grid (degrees). Elevation is positive upwards."""

    azimuth: tuple = (-40.0, 40.0, 160)
    elevation: tuple = (-15.0, 2.0, 24)
    max_range: float = 80.0

    def directions(self) -> np.ndarray:
        az = np.deg2rad(np.linspace(*self.azimuth[:2], int(self.azimuth[2])))
        el = np.deg2rad(np.linspace(*self.elevation[:2], int(self.elevation[2])))
        a, e = np.meshgrid(az, el)
        d = np.stack([np.sin(a) * np.cos(e), -np.sin(e), np.cos(a) * np.cos(e)], axis=-1)
        return d.reshape(-1, 3)


@dataclass
class SceneScript:
    intrinsics: Intrinsics
    camera_trajectory: list
    bodies: list = field(default_factory=list)
    ground_plane: tuple | None = ((0.0, 1.0, 0.0), -1.6)  # n . X + c = 0, world frame
    lidar_pattern: LidarPattern | None = field(default_factory=LidarPattern)
    plane_checker: float = 1.0

    def __post_init__(self):
        for i, b in enumerate(self.bodies):
            if len(b.trajectory) < self.frames:
                raise ValueError(f"body {i} trajectory shorter than camera trajectory")

    @property
    def frames(self) -> int:
        return len(self.camera_trajectory)


@dataclass
class OracleFrame:
    packet: FramePacket
    labels: np.ndarray  # body index, PLANE_LABEL or NO_HIT per pixel
    exact_depth: np.ndarray  # float64 analytic depth, NaN where nothing is hit


def _ray_box(origin, dirs, half):
    """Entry parameter of rays (o + s d) into an origin-centered box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-half - origin) * inv
        t2 = (half - origin) * inv
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = dirs == 0
    inside = np.abs(origin) <= half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    near = lo.max(axis=-1)
    far = hi.min(axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def body_camera_pose(script: SceneScript, body: Body, frame: int) -> Pose:
    cam = script.camera_trajectory[frame]
    return cam.inverse() @ body.trajectory[frame]


def body_box(script: SceneScript, body: Body, frame: int) -> OrientedBox3:
    p = body_camera_pose(script, body, frame)
    r = p.rotation
    if not (np.allclose(r[1], [0, 1, 0], atol=1e-9) and np.allclose(r[:, 1], [0, 1, 0], atol=1e-9)):
        raise UnsupportedOrientationError("body rotation is not about the camera up axis")
    # yaw_rotation(y) == rot_y(-y)
    yaw = normalize_angle(-np.arctan2(r[0, 2], r[0, 0]))
    return OrientedBox3(p.translation, body.dims, yaw)


def trace(script: SceneScript, frame: int, dirs_cam: np.ndarray):
    """Closest hit along camera-frame rays with z component 1.

    Returns (depth, label); depth is the z-depth, inf when nothing is hit.
    """
    cam = script.camera_trajectory[frame]
    shape = dirs_cam.shape[:-1]
    d = dirs_cam.reshape(-1, 3)
    depth = np.full(len(d), np.inf)
    label = np.full(len(d), NO_HIT, dtype=np.int64)
    if script.ground_plane is not None:
        n, c = script.ground_plane
        n = np.asarray(n, dtype=np.float64)
        n_cam = cam.rotation.T @ n
        off = float(n @ cam.translation + c)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -off / (d @ n_cam)
        ok = np.isfinite(s) & (s > 0)
        depth[ok] = s[ok]
        label[ok] = PLANE_LABEL
    for i, body in enumerate(script.bodies):
        box = body_box(script, body, frame)
        rot = yaw_rotation(box.yaw)
        o = rot.T @ (-box.center)
        db = d @ rot
        s = _ray_box(o, db, body.half_extents)
        # bodies win exact ties against the plane; earlier bodies win among bodies
        win = (s < depth) | ((s == depth) & (label == PLANE_LABEL) & np.isfinite(s))
        depth[win] = s[win]
        label[win] = i
    return depth.reshape(shape), label.reshape(shape)


def _box2(box: OrientedBox3, k: Intrinsics, labels: np.ndarray, index: int) -> Box2 | None:
    corners = box.corners()
    if np.all(corners[:, 2] > 0):
        u = k.fx * corners[:, 0] / corners[:, 2] + k.cx
        v = k.fy * corners[:, 1] / corners[:, 2] + k.cy
        x0, y0 = max(np.ceil(u.min()), 0), max(np.ceil(v.min()), 0)
        x1, y1 = min(np.floor(u.max()) + 1, k.width), min(np.floor(v.max()) + 1, k.height)
    else:
        rows, cols = np.nonzero(labels == index)
        x0, y0, x1, y1 = cols.min(), rows.min(), cols.max() + 1, rows.max() + 1
    if x0 >= x1 or y0 >= y1:
        return None
    return Box2(float(x0), float(y0), float(x1), float(y1))


def _colors(script: SceneScript, frame: int, depth, label, rays) -> np.ndarray:
    h, w = label.shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    plane = label == PLANE_LABEL
    if plane.any():
        pts = rays[plane] * depth[plane][:, None]
        world = script.camera_trajectory[frame].apply(pts)
        cell = np.floor(world[:, [0, 2]] / script.plane_checker).astype(np.int64).sum(axis=1) & 1
        img[plane] = np.where(cell[:, None] == 1, [150, 150, 150], [90, 90, 90]).astype(np.uint8)
    for i, body in enumerate(script.bodies):
        img[label == i] = np.asarray(body.color, dtype=np.uint8)
    return img


def render_frame(script: SceneScript, frame: int) -> OracleFrame:
    """Exact depth, color, detections and lidar samples for one frame.

    Depth and lidar points are stored at float32 precision in the packet
    so they survive the binary file formats unchanged; ``exact_depth``
    keeps the float64 values.
    """
    if not 0 <= frame < script.frames:
        raise IndexError(f"frame {frame} outside [0, {script.frames})")
    k = script.intrinsics
    rays = pixel_rays(k)
    depth, label = trace(script, frame, rays)
    exact = np.where(np.isfinite(depth), depth, np.nan)
    color = _colors(script, frame, depth, label, rays)

    detections = []
    for i, body in enumerate(script.bodies):
        box3 = body_box(script, body, frame)
        if not np.any(label == i):
            continue
        box2 = _box2(box3, k, label, i)
        if box2 is None:
            continue
        detections.append((i, Detection(box2, box3, 1.0, body.class_label)))

    lidar = None
    if script.lidar_pattern is not None:
        dirs = script.lidar_pattern.directions()
        dirs = dirs[dirs[:, 2] > 1e-6]
        scaled = dirs / dirs[:, 2:3]
        s, _ = trace(script, frame, scaled)
        pts = scaled * s[:, None]
        rng = np.linalg.norm(pts, axis=1)
        keep = np.isfinite(s) & (rng <= script.lidar_pattern.max_range)
        lidar = pts[keep].astype(np.float32).astype(np.float64)

    packet = FramePacket(
        frame_index=frame,
        depth=exact.astype(np.float32).astype(np.float64),
        color=color,
        camera_pose=script.camera_trajectory[frame],
        detections=detections,
        lidar_points=lidar,
    )
    return OracleFrame(packet, label, exact)


def render_sequence(script: SceneScript) -> list[OracleFrame]:
    return [render_frame(script, t) for t in range(script.frames)]


@dataclass(frozen=True)
class NoiseSpec:
    seed: int = 0
    depth_sigma: float = 0.0
    center_sigma: float = 0.0
    yaw_sigma: float = 0.0
    drop_probability: float = 0.0


def perturb(packet: FramePacket, noise: NoiseSpec) -> FramePacket:
    """Deterministic (per seed and frame) depth noise, box jitter and
    detection drop-out."""
    rng = np.random.default_rng([noise.seed, packet.frame_index])
    depth = np.array(packet.depth, copy=True)
    if noise.depth_sigma > 0:
        valid = np.isfinite(depth)
        depth[valid] += rng.normal(0.0, noise.depth_sigma, int(valid.sum()))
        depth[valid & (depth <= 0)] = np.nan
    dets = []
    for tid, det in packet.detections:
        if noise.drop_probability > 0 and rng.random() < noise.drop_probability:
            continue
        box3 = det.box3
        if box3 is not None and (noise.center_sigma > 0 or noise.yaw_sigma > 0):
            center = box3.center + (rng.normal(0.0, noise.center_sigma, 3) if noise.center_sigma > 0 else 0.0)
            yaw = box3.yaw + (rng.normal(0.0, noise.yaw_sigma) if noise.yaw_sigma > 0 else 0.0)
            box3 = OrientedBox3(center, box3.dims, yaw)
        dets.append((tid, replace(det, box3=box3)))
    return replace(packet, depth=depth, detections=dets)


def default_intrinsics(width: int = 320, height: int = 96) -> Intrinsics:
    f = width / 2.0
    return Intrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height, baseline=0.54)


def _car_pose(x, y_ground, z, height, yaw):
    return Pose(yaw_rotation(yaw), np.array([x, y_ground - height / 2.0, z]))


def default_scene(
    frames: int = 60,
    width: int = 320,
    height: int = 96,
    moving: bool = True,
    lateral_speed: float = 0.1,
    camera_speed: float = 0.1,
) -> SceneScript:
    """Ground plane, a parked cuboid and (optionally) a cuboid driving
    8 m ahead of a forward-moving camera while drifting sideways.

    With ``moving=False`` every body is static in the world frame.
    """
    k = default_intrinsics(width, height)
    ground_y = 1.6
    cams = [Pose.from_translation(0.0, 0.0, camera_speed * t) for t in range(frames)]
    car_dims = (4.0, 1.8, 1.5)
    if moving:
        lead = [_car_pose(2.0 - lateral_speed * t, ground_y, 8.0 + camera_speed * t, 1.5, np.pi / 2) for t in range(frames)]
    else:
        lead = [_car_pose(2.0, ground_y, 14.0, 1.5, np.pi / 2)] * frames
    parked = [_car_pose(5.0, ground_y, 18.0, 1.5, np.pi / 2)] * frames
    bodies = [
        Body(car_dims, lead, (200, 40, 40)),
        Body(car_dims, parked, (40, 60, 200)),
    ]
    return SceneScript(k, cams, bodies, ((0.0, 1.0, 0.0), -ground_y))
