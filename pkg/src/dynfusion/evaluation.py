"""Mean relative depth error against sparse ground-truth points."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box2, Intrinsics, project

WHOLE_IMAGE = "whole_image"
WITHIN_BOXES = "within_boxes"


@dataclass(frozen=True)
class EvalConfig:
    range_caps: tuple = (10.0, 20.0, 30.0, 40.0)
    modes: tuple = (WHOLE_IMAGE, WITHIN_BOXES)

    def __post_init__(self):
        caps = tuple(float(c) for c in self.range_caps)
        if not caps or any(c <= 0 for c in caps) or any(b <= a for a, b in zip(caps, caps[1:])):
            raise ValueError("range caps must be positive and strictly ascending")
        object.__setattr__(self, "range_caps", caps)
        for m in self.modes:
            if m not in (WHOLE_IMAGE, WITHIN_BOXES):
                raise ValueError(f"unknown evaluation mode {m!r}")


def relative_errors(pred: np.ndarray, gt_points, k: Intrinsics, cap: float, regions=None) -> np.ndarray:
    """Per-point |d - d_gt| / d_gt for every counted ground-truth point."""
    if not cap > 0:
        raise ValueError("cap must be positive")
    pts = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        return np.zeros(0)
    gt = pts[:, 2]
    uv = project(pts, k)
    ok = np.all(np.isfinite(uv), axis=1) & (gt <= cap)
    px = np.floor(uv[ok] + 0.5).astype(np.int64)
    idx = np.nonzero(ok)[0]
    inside = (px[:, 0] >= 0) & (px[:, 0] < k.width) & (px[:, 1] >= 0) & (px[:, 1] < k.height)
    idx, px = idx[inside], px[inside]
    if regions is not None:
        in_region = np.zeros(len(px), dtype=bool)
        for box in regions:
            in_region |= box.contains_pixels(px)
        idx, px = idx[in_region], px[in_region]
    d = np.asarray(pred, dtype=np.float64)[px[:, 1], px[:, 0]]
    valid = np.isfinite(d) & (d > 0)
    return np.abs(d[valid] - gt[idx[valid]]) / gt[idx[valid]]


def mre(pred: np.ndarray, gt_points, k: Intrinsics, cap: float, regions=None) -> tuple[float | None, int]:
    """Mean relative error and the number M of counted points.

    A ground-truth point counts when its depth is within ``cap``, it
    projects inside the image (and inside one of ``regions`` when given)
    and the prediction at its pixel is valid. Returns ``(None, 0)`` when
    nothing counts.
    """
    err = relative_errors(pred, gt_points, k, cap, regions)
    if not len(err):
        return None, 0
    return float(err.mean()), int(len(err))


@dataclass
class EvalReport:
    """Per-frame and pooled MRE keyed by (cap, mode)."""

    caps: tuple = ()
    modes: tuple = ()
    per_frame: dict = field(default_factory=dict)  # (frame, cap, mode) -> (mre, M)
    _sums: dict = field(default_factory=dict)  # (cap, mode) -> (sum of rel errors, M)

    def add(self, frame: int, cap: float, mode: str, errors: np.ndarray):
        m = len(errors)
        self.per_frame[(frame, cap, mode)] = (float(errors.mean()) if m else None, m)
        s, n = self._sums.get((cap, mode), (0.0, 0))
        self._sums[(cap, mode)] = (s + float(errors.sum()), n + m)

    def aggregate(self, cap: float, mode: str) -> tuple[float | None, int]:
        s, n = self._sums.get((float(cap), mode), (0.0, 0))
        return (s / n if n else None), n

    @property
    def frames(self) -> list[int]:
        return sorted({f for f, _, _ in self.per_frame})

    def is_empty(self) -> bool:
        return not self.per_frame

    def as_dict(self) -> dict:
        return {
            "aggregation": "pooled over all counted points",
            "aggregate": [
                {"cap": c, "mode": m, "mre": self.aggregate(c, m)[0], "M": self.aggregate(c, m)[1]}
                for c in self.caps for m in self.modes
            ],
            "per_frame": [
                {"frame": f, "cap": c, "mode": m, "mre": v[0], "M": v[1]}
                for (f, c, m), v in sorted(self.per_frame.items())
            ],
        }


def evaluate_sequence(renders, packets, k: Intrinsics, config: EvalConfig | None = None) -> EvalReport:
    """Score rendered depth maps against each packet's lidar points.

    ``renders`` is either a mapping ``frame_index -> depth`` or a callable
    returning the depth render for a frame index.
    """
    config = config or EvalConfig()
    report = EvalReport(config.range_caps, tuple(config.modes))
    get = renders if callable(renders) else renders.__getitem__
    for packet in packets:
        f = packet.frame_index
        pts = packet.lidar_points if packet.lidar_points is not None else np.zeros((0, 3))
        pred = get(f) if len(pts) else None
        boxes = [det.box2 for _, det in packet.detections]
        for cap in config.range_caps:
            for mode in config.modes:
                if pred is None:
                    report.add(f, cap, mode, np.zeros(0))
                    continue
                regions = boxes if mode == WITHIN_BOXES else None
                report.add(f, cap, mode, relative_errors(pred, pts, k, cap, regions))
    return report


def format_table(reports: dict, caps=None, mode: str = WHOLE_IMAGE, title: str | None = None) -> str:
    """Text table: one block per cap, one row per reconstruction mode,
    one column per sequence.

    ``reports`` maps ``(sequence, recon_mode) -> EvalReport``.
    """
    seqs = sorted({s for s, _ in reports})
    recon_modes = sorted({r for _, r in reports}, key=lambda r: (r != "static", r))
    if caps is None:
        caps = next(iter(reports.values())).caps if reports else ()
    lines = [title or f"Mean relative error ({mode.replace('_', ' ')}); pooled over all counted points"]
    w = max([12] + [len(s) + 2 for s in seqs])
    for cap in caps:
        lines.append(f"-- depth <= {cap:g} m")
        lines.append("mode".ljust(12) + "".join(s.rjust(w) for s in seqs))
        for rm in recon_modes:
            row = ("non-dynamic" if rm == "static" else rm).ljust(12)
            for s in seqs:
                rep = reports.get((s, rm))
                v, n = rep.aggregate(cap, mode) if rep else (None, 0)
                cell = "-" if v is None else f"{v:.4f} ({n})"
                row += cell.rjust(w)
            lines.append(row)
    return "\n".join(lines)
