"""Splitting a depth frame into background and per-object slices."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from sklearn.base import BaseEstimator, TransformerMixin

from .geometry import CONTAINS_TOL, Box2, Intrinsics, OrientedBox3, backproject, contains, enlarge, project

# depth maps carry about float32 precision; points backprojected from them
# may sit this far (relative to depth) outside a face they lie on
DEPTH_REL_TOL = 1e-6
ENLARGE_FACTOR = 0.15


class Strategy(str, Enum):
    """How object pixels are removed from the background slice."""

    BOX2D = "box2d"  # invalidate every pixel inside any 2D box
    BOX3D15 = "box3d15"  # invalidate points inside 3D boxes enlarged by 15%

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            raise ValueError(f"unknown decomposition strategy {value!r}; expected box2d or box3d15") from None


class DegenerateHullError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box2: Box2
    box3: OrientedBox3 | None
    score: float = 1.0
    class_label: str = "car"

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass
class DecompositionResult:
    background: np.ndarray
    object_slices: list[tuple[int, np.ndarray]] = field(default_factory=list)
    strategy_used: Strategy = Strategy.BOX2D

    def slice_for(self, tracklet_id: int) -> np.ndarray | None:
        for tid, s in self.object_slices:
            if tid == tracklet_id:
                return s
        return None


def hull_mask(lidar_points, k: Intrinsics) -> np.ndarray:
    """Boolean (H, W) mask of pixels inside or on the convex hull of the
    projected lidar points."""
    pts = np.asarray(lidar_points, dtype=np.float64).reshape(-1, 3)
    uv = project(pts, k)
    uv = uv[np.all(np.isfinite(uv), axis=1)]
    if len(uv) < 3:
        raise DegenerateHullError(f"need at least 3 points in front of the camera, got {len(uv)}")
    try:
        hull = ConvexHull(uv)
    except QhullError as exc:
        raise DegenerateHullError("projected lidar points are collinear") from exc
    v, u = np.mgrid[0 : k.height, 0 : k.width]
    grid = np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)
    # facet equations are outward normals: n . x + c <= 0 inside
    eq = hull.equations
    tol = 1e-9 * max(1.0, float(np.abs(uv).max()))
    inside = np.all(grid @ eq[:, :2].T + eq[:, 2] <= tol, axis=1)
    return inside.reshape(k.shape)


def apply_mask(depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.array(depth, dtype=np.float64, copy=True)
    out[~mask] = np.nan
    return out


def decompose(
    depth: np.ndarray,
    detections,
    k: Intrinsics,
    strategy: Strategy | str = Strategy.BOX2D,
    enlarge_factor: float = ENLARGE_FACTOR,
) -> DecompositionResult:
    """Carve object slices out of a depth frame with 3D boxes.

    Parameters
    ----------
    depth : (H, W) array, NaN marks invalid pixels
    detections : sequence of (tracklet_id, Detection)
    strategy : Strategy
        ``box2d`` blanks every pixel inside any 2D box in the background;
        ``box3d15`` blanks points inside the enlarged 3D boxes.

    A pixel claimed by several boxes goes to the box whose center is
    closest to its 3D point; ties go to the lower tracklet id.
    """
    strategy = Strategy.parse(strategy)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != k.shape:
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics {k.shape}")
    background = np.array(depth, copy=True)
    background[~(np.isfinite(background) & (background > 0))] = np.nan
    dets = sorted(detections, key=lambda item: item[0])
    if not dets:
        return DecompositionResult(background, [], strategy)

    points, pixels = backproject(depth, k)
    with_3d = [(tid, det) for tid, det in dets if det.box3 is not None]
    owner = np.full(len(points), -1, dtype=np.int64)
    tol = np.maximum(CONTAINS_TOL, DEPTH_REL_TOL * points[:, 2:3])
    if with_3d and len(points):
        dist = np.full((len(with_3d), len(points)), np.inf)
        for j, (_, det) in enumerate(with_3d):
            inside = contains(det.box3, points, tol)
            dist[j, inside] = np.linalg.norm(points[inside] - det.box3.center, axis=1)
        # argmin returns the first (lowest id) box among equal distances
        best = np.argmin(dist, axis=0)
        claimed = np.isfinite(dist[best, np.arange(len(points))])
        owner[claimed] = best[claimed]

    slices = []
    for j, (tid, _) in enumerate(with_3d):
        s = np.full(depth.shape, np.nan)
        sel = owner == j
        s[pixels[sel, 1], pixels[sel, 0]] = depth[pixels[sel, 1], pixels[sel, 0]]
        slices.append((tid, s))

    if strategy is Strategy.BOX2D:
        for _, det in dets:
            background[det.box2.pixel_mask(depth.shape)] = np.nan
    else:
        carve = owner >= 0
        for _, det in with_3d:
            carve |= contains(enlarge(det.box3, enlarge_factor), points, tol)
        background[pixels[carve, 1], pixels[carve, 0]] = np.nan
    return DecompositionResult(background, slices, strategy)


class SceneDecomposer(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`decompose`.

    ``transform`` takes a sequence of frame packets and returns one
    :class:`DecompositionResult` per packet. Packets must carry tracklet
    ids on their detections.
    """

    def __init__(self, strategy="box2d", enlarge_factor=ENLARGE_FACTOR, use_hull=False):
        self.strategy = strategy
        self.enlarge_factor = enlarge_factor
        self.use_hull = use_hull

    def fit(self, X, y=None, intrinsics=None):
        if intrinsics is None:
            raise ValueError("SceneDecomposer.fit requires intrinsics")
        self.strategy_ = Strategy.parse(self.strategy)
        self.intrinsics_ = intrinsics
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "intrinsics_")
        out = []
        for packet in X:
            depth = packet.depth
            if self.use_hull and packet.lidar_points is not None and len(packet.lidar_points):
                depth = apply_mask(depth, hull_mask(packet.lidar_points, self.intrinsics_))
            dets = []
            for tid, det in packet.detections:
                if tid is None:
                    raise ValueError("SceneDecomposer needs tracklet ids; run a tracker first")
                dets.append((tid, det))
            out.append(decompose(depth, dets, self.intrinsics_, self.strategy_, self.enlarge_factor))
        return out
