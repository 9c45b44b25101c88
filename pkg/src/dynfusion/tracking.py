"""IoU-based online data association for 2D detections."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator

from .geometry import Box2


@dataclass(frozen=True)
class Track:
    tracklet_id: int
    last_box2: Box2
    last_seen_frame: int
    age: int = 0
    misses: int = 0


def box_iou(a: Box2, b: Box2) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


def iou_matrix(tracks_boxes, det_boxes) -> np.ndarray:
    m = np.zeros((len(tracks_boxes), len(det_boxes)))
    for i, a in enumerate(tracks_boxes):
        for j, b in enumerate(det_boxes):
            m[i, j] = box_iou(a, b)
    return m


def match(iou: np.ndarray, iou_threshold: float) -> list[tuple[int, int]]:
    """Max-total-IoU one-to-one matching restricted to pairs at or above
    the threshold. Returns (row, col) pairs sorted by row."""
    if iou.size == 0:
        return []
    gain = np.where(iou >= iou_threshold, iou, 0.0)
    rows, cols = linear_sum_assignment(gain, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if iou[r, c] >= iou_threshold]


def associate(tracks, detections, frame: int, iou_threshold: float = 0.3, max_misses: int = 3, next_id: int | None = None):
    """Assign tracklet ids to one frame of detections.

    Parameters
    ----------
    tracks : list of Track
    detections : list of Detection or Box2
    next_id : first fresh id; defaults to one past the largest track id

    Returns
    -------
    ids : list of int, one per detection
    tracks : updated list of live tracks
    next_id : next unused id
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    if max_misses < 0:
        raise ValueError("max_misses must be >= 0")
    boxes = [d if isinstance(d, Box2) else d.box2 for d in detections]
    if next_id is None:
        next_id = max((t.tracklet_id for t in tracks), default=-1) + 1

    pairs = match(iou_matrix([t.last_box2 for t in tracks], boxes), iou_threshold)
    det_to_track = {c: r for r, c in pairs}
    ids = [0] * len(boxes)
    updated = []
    matched_tracks = set()
    for j, box in enumerate(boxes):
        if j in det_to_track:
            t = tracks[det_to_track[j]]
            matched_tracks.add(det_to_track[j])
            ids[j] = t.tracklet_id
            updated.append(replace(t, last_box2=box, last_seen_frame=frame, age=t.age + 1, misses=0))
        else:
            ids[j] = next_id
            updated.append(Track(next_id, box, frame))
            next_id += 1
    for i, t in enumerate(tracks):
        if i in matched_tracks:
            continue
        t = replace(t, age=t.age + 1, misses=t.misses + 1)
        if t.misses <= max_misses:
            updated.append(t)
    updated.sort(key=lambda t: t.tracklet_id)
    return ids, updated, next_id


class IouTracker(BaseEstimator):
    """Stateful per-stream tracker; frames must arrive in order.

    Ids are never reused within one tracker instance.
    """

    def __init__(self, iou_threshold=0.3, max_misses=3):
        self.iou_threshold = iou_threshold
        self.max_misses = max_misses

    def reset(self):
        self.tracks_ = []
        self.next_id_ = 0
        self.last_frame_ = None
        return self

    def update(self, detections, frame: int) -> list[int]:
        if not hasattr(self, "tracks_"):
            self.reset()
        if self.last_frame_ is not None and frame <= self.last_frame_:
            raise ValueError(f"frame {frame} is not after {self.last_frame_}")
        ids, self.tracks_, self.next_id_ = associate(
            self.tracks_, detections, frame, self.iou_threshold, self.max_misses, self.next_id_
        )
        self.last_frame_ = frame
        return ids

    def fit_predict(self, X, y=None) -> list[list[int]]:
        """Track a whole sequence of per-frame detection lists."""
        self.reset()
        return [self.update(dets, t) for t, dets in enumerate(X)]
