"""Scikit-learn style front end for streaming dynamic reconstruction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dynamic_map import DynamicMap, MapConfig
from .evaluation import WHOLE_IMAGE, EvalConfig, EvalReport, evaluate_sequence
from .tsdf import VolumeConfig
from .validation import check_intrinsics, check_packets


class DynamicFusion(BaseEstimator):
    """Fuse a stream of frame packets into a background volume and one
    volume per tracked object.

    ``fit`` rebuilds the map from a sequence of packets, ``partial_fit``
    appends frames, ``predict`` renders the live view (composite z-depth,
    NaN where empty) for already-processed frames and ``score`` returns the
    negated pooled mean relative error against each packet's lidar points.

    Parameters
    ----------
    mode : {"dynamic", "static"}
        ``static`` is the baseline that fuses everything into the background.
    strategy : {"box2d", "box3d15"}
    background_voxel_size, object_voxel_size : float
        Meters.
    trunc_factor : float
        Truncation distance in voxels.
    """

    def __init__(
        self,
        mode="dynamic",
        strategy="box2d",
        background_voxel_size=0.0468,
        object_voxel_size=0.0156,
        trunc_factor=4.0,
        max_weight=128.0,
        block_side=8,
        max_depth=40.0,
        min_object_pixels=30,
        use_hull=False,
        iou_threshold=0.3,
        max_misses=3,
        enlarge_factor=0.15,
    ):
        self.mode = mode
        self.strategy = strategy
        self.background_voxel_size = background_voxel_size
        self.object_voxel_size = object_voxel_size
        self.trunc_factor = trunc_factor
        self.max_weight = max_weight
        self.block_side = block_side
        self.max_depth = max_depth
        self.min_object_pixels = min_object_pixels
        self.use_hull = use_hull
        self.iou_threshold = iou_threshold
        self.max_misses = max_misses
        self.enlarge_factor = enlarge_factor

    def _map_config(self) -> MapConfig:
        def vol(size):
            return VolumeConfig(
                voxel_size=size,
                trunc_dist=self.trunc_factor * size,
                max_weight=self.max_weight,
                block_side=self.block_side,
                max_depth=self.max_depth,
            )

        return MapConfig(
            background=vol(self.background_voxel_size),
            objects=vol(self.object_voxel_size),
            strategy=self.strategy,
            mode=self.mode,
            min_object_pixels=self.min_object_pixels,
            use_hull=self.use_hull,
            iou_threshold=self.iou_threshold,
            max_misses=self.max_misses,
            enlarge_factor=self.enlarge_factor,
        )

    def fit(self, X, y=None, intrinsics=None):
        """Reconstruct from scratch over the packet sequence ``X``."""
        if intrinsics is None:
            raise ValueError("fit requires intrinsics=")
        k = check_intrinsics(intrinsics)
        self.map_ = DynamicMap(k, self._map_config())
        self.intrinsics_ = k
        self.reports_ = []
        return self.partial_fit(X)

    def partial_fit(self, X, y=None, intrinsics=None):
        """Process further packets (a single packet or a sequence)."""
        if not hasattr(self, "map_"):
            return self.fit(X, intrinsics=intrinsics)
        if hasattr(X, "frame_index"):
            X = [X]
        packets = check_packets(X, self.intrinsics_, self.map_.last_frame)
        for p in packets:
            self.reports_.append(self.map_.process_frame(p))
        self.n_frames_ = len(self.map_.trajectory)
        return self

    def _frame_indices(self, X):
        if hasattr(X, "frame_index"):
            return [X.frame_index]
        return [p if isinstance(p, (int, np.integer)) else p.frame_index for p in X]

    def predict(self, X) -> np.ndarray:
        """(n, H, W) live-view depth renders for packets or frame indices."""
        check_is_fitted(self, "map_")
        idx = self._frame_indices(X)
        k = self.intrinsics_
        if not idx:
            return np.zeros((0, k.height, k.width))
        return np.stack([self.map_.render_live_view(i)[0] for i in idx])

    def predict_ids(self, X) -> np.ndarray:
        """(n, H, W) volume id per pixel (-1 background, -2 empty)."""
        check_is_fitted(self, "map_")
        return np.stack([self.map_.render_live_view(i)[1] for i in self._frame_indices(X)])

    def evaluate(self, X, config: EvalConfig | None = None) -> EvalReport:
        check_is_fitted(self, "map_")
        packets = [X] if hasattr(X, "frame_index") else list(X)
        return evaluate_sequence(lambda f: self.map_.render_live_view(f)[0], packets, self.intrinsics_, config)

    def score(self, X, y=None, cap: float = 40.0) -> float:
        """Negative pooled whole-image MRE within ``cap`` meters."""
        rep = self.evaluate(X, EvalConfig((cap,), (WHOLE_IMAGE,)))
        value, _ = rep.aggregate(cap, WHOLE_IMAGE)
        return float("nan") if value is None else -value
