"""Time-indexed map of a background volume plus per-object volumes."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .decomposition import Detection, Strategy, apply_mask, decompose, hull_mask, DegenerateHullError
from .geometry import Intrinsics, Pose, compose, invert
from .tracking import IouTracker
from .tsdf import Mesh, TsdfVolume, VolumeConfig

log = logging.getLogger(__name__)

BACKGROUND_ID = -1
NO_SURFACE = -2


class Mode(str, Enum):
    DYNAMIC = "dynamic"
    STATIC = "static"  # non-dynamic baseline: everything goes to the background

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        aliases = {"non-dynamic": "static", "nondynamic": "static", "baseline": "static"}
        v = aliases.get(str(value), str(value))
        try:
            return cls(v)
        except ValueError:
            raise ValueError(f"unknown mode {value!r}; expected dynamic or static") from None


class FrameOrderError(ValueError):
    pass


@dataclass(eq=False)
class FramePacket:
    """Inputs of one time step.

    ``detections`` holds ``(tracklet_id or None, Detection)`` pairs.
    ``camera_pose`` maps camera coordinates to world coordinates.
    """

    frame_index: int
    depth: np.ndarray
    color: np.ndarray | None
    camera_pose: Pose
    detections: list = field(default_factory=list)
    lidar_points: np.ndarray | None = None

    @property
    def has_track_ids(self) -> bool:
        return all(tid is not None for tid, _ in self.detections)


@dataclass
class ObjectInstance:
    tracklet_id: int
    volume: TsdfVolume
    pose_history: dict = field(default_factory=dict)
    class_label: str = "car"


@dataclass
class MapConfig:
    background: VolumeConfig = field(default_factory=lambda: VolumeConfig(voxel_size=0.0468))
    objects: VolumeConfig = field(default_factory=lambda: VolumeConfig(voxel_size=0.0156))
    strategy: Strategy = Strategy.BOX2D
    mode: Mode = Mode.DYNAMIC
    min_object_pixels: int = 30
    use_hull: bool = False
    iou_threshold: float = 0.3
    max_misses: int = 3
    enlarge_factor: float = 0.15

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy)
        self.mode = Mode.parse(self.mode)


@dataclass
class FrameReport:
    frame_index: int
    blocks_allocated: dict = field(default_factory=dict)
    pixels_fused: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    tracklet_ids: list = field(default_factory=list)

    def as_dict(self) -> dict:
        key = lambda k: "background" if k == BACKGROUND_ID else str(k)
        return {
            "frame_index": self.frame_index,
            "blocks_allocated": {key(k): v for k, v in self.blocks_allocated.items()},
            "pixels_fused": {key(k): v for k, v in self.pixels_fused.items()},
            "warnings": list(self.warnings),
            "timings": dict(self.timings),
        }


class DynamicMap:
    """Camera trajectory, background volume and object volumes.

    Background integration uses the camera-to-world pose. Each object is
    integrated in its own frame using only the camera-relative pose taken
    from its 3D box, so camera drift never touches object volumes.
    """

    def __init__(self, intrinsics: Intrinsics, config: MapConfig | None = None):
        self.intrinsics = intrinsics
        self.config = config or MapConfig()
        self.background = TsdfVolume(self.config.background)
        self.trajectory: dict[int, Pose] = {}
        self.objects: dict[int, ObjectInstance] = {}
        self.tracker = IouTracker(self.config.iou_threshold, self.config.max_misses).reset()

    @property
    def last_frame(self) -> int | None:
        return max(self.trajectory) if self.trajectory else None

    def process_frame(self, packet: FramePacket) -> FrameReport:
        cfg = self.config
        k = self.intrinsics
        last = self.last_frame
        if last is not None and packet.frame_index <= last:
            raise FrameOrderError(f"frame {packet.frame_index} arrived after frame {last}")
        report = FrameReport(packet.frame_index)
        t0 = time.perf_counter()

        depth = np.asarray(packet.depth, dtype=np.float64)
        if cfg.use_hull and packet.lidar_points is not None and len(packet.lidar_points):
            try:
                depth = apply_mask(depth, hull_mask(packet.lidar_points, k))
            except DegenerateHullError as exc:
                report.warnings.append(f"hull mask skipped: {exc}")

        detections = list(packet.detections)
        if detections and not packet.has_track_ids:
            ids = self.tracker.update([d for _, d in detections], packet.frame_index)
            detections = [(tid, d) for tid, (_, d) in zip(ids, detections)]
        report.tracklet_ids = [tid for tid, _ in detections]
        t1 = time.perf_counter()
        report.timings["tracking"] = t1 - t0

        if cfg.mode is Mode.STATIC:
            background, slices = depth, []
            dets_by_id = {}
        else:
            usable = []
            for tid, det in detections:
                if det.box3 is not None and det.box3.center[2] <= 0:
                    report.warnings.append(f"tracklet {tid}: 3D box behind camera, skipped")
                    usable.append((tid, Detection(det.box2, None, det.score, det.class_label)))
                else:
                    usable.append((tid, det))
            result = decompose(depth, usable, k, cfg.strategy, cfg.enlarge_factor)
            background, slices = result.background, result.object_slices
            dets_by_id = dict(usable)
        t2 = time.perf_counter()
        report.timings["decomposition"] = t2 - t1

        stats = self.background.integrate(background, packet.color, k, packet.camera_pose)
        report.blocks_allocated[BACKGROUND_ID] = stats.blocks_allocated
        report.pixels_fused[BACKGROUND_ID] = stats.pixels
        self.trajectory[packet.frame_index] = packet.camera_pose
        t3 = time.perf_counter()
        report.timings["background_fusion"] = t3 - t2

        for tid, s in slices:
            n = int(np.count_nonzero(np.isfinite(s)))
            det = dets_by_id[tid]
            obj = self.objects.get(tid)
            if n < cfg.min_object_pixels:
                # too few pixels to fuse, but a known object still gets placed
                if obj is not None:
                    obj.pose_history[packet.frame_index] = det.box3.pose()
                continue
            if obj is None:
                obj = ObjectInstance(tid, TsdfVolume(cfg.objects), class_label=det.class_label)
                self.objects[tid] = obj
            pose = det.box3.pose()
            st = obj.volume.integrate(s, packet.color, k, invert(pose))
            obj.pose_history[packet.frame_index] = pose
            report.blocks_allocated[tid] = st.blocks_allocated
            report.pixels_fused[tid] = st.pixels
        report.timings["object_fusion"] = time.perf_counter() - t3
        for w in report.warnings:
            log.warning("frame %d: %s", packet.frame_index, w)
        return report

    # -- placement -------------------------------------------------------

    def world_pose(self, tracklet_id: int, frame_index: int) -> Pose:
        """Object-to-world pose: camera-to-world composed with object-to-camera."""
        if tracklet_id not in self.objects:
            raise KeyError(f"unknown tracklet {tracklet_id}")
        obj = self.objects[tracklet_id]
        if frame_index not in obj.pose_history or frame_index not in self.trajectory:
            raise KeyError(f"tracklet {tracklet_id} has no pose at frame {frame_index}")
        return compose(self.trajectory[frame_index], obj.pose_history[frame_index])

    def visible_objects(self, frame_index: int) -> list[int]:
        return sorted(t for t, o in self.objects.items() if frame_index in o.pose_history)

    def render_view(self, camera_pose: Pose, frame_index: int | None = None, k: Intrinsics | None = None):
        """Composite depth and volume-id images from an arbitrary camera.

        Objects are placed at their world pose for ``frame_index`` (none
        are drawn when it is None).
        """
        k = k or self.intrinsics
        depth = self.background.raycast(k, camera_pose)
        ids = np.where(np.isfinite(depth), BACKGROUND_ID, NO_SURFACE).astype(np.int64)
        if frame_index is not None:
            for tid in self.visible_objects(frame_index):
                vol_from_cam = compose(invert(self.world_pose(tid, frame_index)), camera_pose)
                d = self.objects[tid].volume.raycast(k, vol_from_cam)
                closer = np.isfinite(d) & ~(d >= depth)
                depth = np.where(closer, d, depth)
                ids[closer] = tid
        return depth, ids

    def render_live_view(self, frame_index: int, k: Intrinsics | None = None):
        if frame_index not in self.trajectory:
            raise KeyError(f"frame {frame_index} has not been processed")
        return self.render_view(self.trajectory[frame_index], frame_index, k)

    def export_state(self, frame_index: int) -> dict:
        """World-frame meshes: ``{"background": Mesh, tracklet_id: Mesh}``.

        Only non-empty meshes are included; objects without a pose at
        ``frame_index`` are left out.
        """
        out = {}
        bg = self.background.extract_mesh()
        if not bg.is_empty:
            out["background"] = bg
        for tid in self.visible_objects(frame_index):
            m = self.objects[tid].volume.extract_mesh()
            if not m.is_empty:
                out[tid] = m.transformed(self.world_pose(tid, frame_index))
        return out

    def object_meshes(self) -> dict[int, Mesh]:
        """Object meshes in their own (box) frames."""
        return {tid: o.volume.extract_mesh() for tid, o in sorted(self.objects.items())}
