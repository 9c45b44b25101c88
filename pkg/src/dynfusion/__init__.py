"""Multi-body dynamic scene reconstruction.

A depth stream is split into a static background and one slice per
tracked object using 3D boxes; each slice is fused into its own
block-hashed TSDF volume. Objects are reconstructed in camera-relative
frames and placed in the world only for rendering and export.
"""

from .decomposition import DecompositionResult, Detection, SceneDecomposer, Strategy, decompose, hull_mask
from .dynamic_map import DynamicMap, FramePacket, FrameReport, MapConfig, Mode, ObjectInstance
from .estimator import DynamicFusion
from .evaluation import EvalConfig, EvalReport, evaluate_sequence, mre
from .geometry import (
    Box2,
    Intrinsics,
    OrientedBox3,
    Pose,
    backproject,
    compose,
    contains,
    disparity_to_depth,
    enlarge,
    invert,
    project,
)
from .tracking import IouTracker, Track, associate
from .tsdf import Mesh, TsdfVolume, VolumeConfig

__all__ = [
    "Box2", "DecompositionResult", "Detection", "DynamicFusion", "DynamicMap", "EvalConfig",
    "EvalReport", "FramePacket", "FrameReport", "Intrinsics", "IouTracker", "MapConfig", "Mesh",
    "Mode", "ObjectInstance", "OrientedBox3", "Pose", "SceneDecomposer", "Strategy", "Track",
    "TsdfVolume", "VolumeConfig", "associate", "backproject", "compose", "contains", "decompose",
    "disparity_to_depth", "enlarge", "evaluate_sequence", "hull_mask", "invert", "mre", "project",
]
