"""Rigid transforms, pinhole projection and oriented-box tests.

Camera frame: x right, y down, z forward. The "up" axis used for box yaw
is -y. Depth maps are float arrays of shape (H, W); NaN marks an invalid
pixel. Pixel ``(u, v)`` has its center at continuous coordinate ``(u, v)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POSE_TOL = 1e-6
# containment slack in meters; surface points of a box sit exactly on a face
CONTAINS_TOL = 1e-9


class InvalidPoseError(ValueError):
    """Rotation block is not a proper rotation."""


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_rotation(yaw: float) -> np.ndarray:
    """Rotation by ``yaw`` about the camera up axis (-y)."""
    return rot_y(-yaw)


def normalize_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = float(np.mod(angle + np.pi, 2.0 * np.pi) - np.pi)
    if a <= -np.pi:
        a += 2.0 * np.pi
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid-body transform ``x -> R @ x + t``.

    ``compose(a, b)`` (or ``a @ b``) applies ``b`` first.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "Pose":
        return cls(np.eye(3), np.array([x, y, z], dtype=np.float64))

    @classmethod
    def from_matrix(cls, m, tol: float = POSE_TOL) -> "Pose":
        """Build from a 3x4 or 4x4 matrix, checking the rotation block."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise ValueError(f"pose matrix must be 3x4 or 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidPoseError("pose matrix has non-finite entries")
        pose = cls(m[:3, :3], m[:3, 3])
        check_rotation(pose.rotation, tol)
        return pose

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return invert(self)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def allclose(self, other: "Pose", atol: float = POSE_TOL) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def check_rotation(r: np.ndarray, tol: float = POSE_TOL) -> None:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise InvalidPoseError(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0):
        raise InvalidPoseError("rotation is not orthonormal")
    det = float(np.linalg.det(r))
    if abs(det - 1.0) > tol:
        raise InvalidPoseError(f"rotation determinant is {det:.6g}, expected +1")


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    baseline: float = 1.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.baseline > 0:
            raise ValueError("baseline must be positive")
        if not (int(self.width) > 0 and int(self.height) > 0):
            raise ValueError("image size must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "baseline": self.baseline,
        }


def disparity_to_depth(disparity: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Depth = baseline * fx / disparity; non-positive or non-finite -> NaN."""
    z = np.asarray(disparity, dtype=np.float64)
    out = np.full(z.shape, np.nan)
    ok = np.isfinite(z) & (z > 0)
    with np.errstate(over="ignore"):
        out[ok] = k.baseline * k.fx / z[ok]
    out[~np.isfinite(out)] = np.nan
    return out


def backproject(depth: np.ndarray, k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Lift valid pixels to camera-frame points.

    Returns
    -------
    points : (N, 3) float array
    pixels : (N, 2) int array of (u, v) source pixels, row-major order
    """
    d = np.asarray(depth, dtype=np.float64)
    v, u = np.nonzero(np.isfinite(d) & (d > 0))
    z = d[v, u]
    pts = np.stack([z * (u - k.cx) / k.fx, z * (v - k.cy) / k.fy, z], axis=1)
    return pts, np.stack([u, v], axis=1)


def pixel_rays(k: Intrinsics) -> np.ndarray:
    """(H, W, 3) ray directions scaled so that z == 1."""
    v, u = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)


def project(points, k: Intrinsics) -> np.ndarray:
    """Project camera-frame points to continuous pixel coordinates.

    Points with ``z <= 0`` are behind the camera and map to NaN.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    out = np.full((len(p), 2), np.nan)
    front = p[:, 2] > 0
    z = p[front, 2]
    out[front, 0] = k.fx * p[front, 0] / z + k.cx
    out[front, 1] = k.fy * p[front, 1] / z + k.cy
    return out[0] if single else out


@dataclass(frozen=True)
class Box2:
    """Axis-aligned pixel box; a pixel (u, v) is inside iff
    x_min <= u < x_max and y_min <= v < y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate Box2 {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def pixel_mask(self, shape: tuple[int, int]) -> np.ndarray:
        h, w = shape
        u = np.arange(w)
        v = np.arange(h)
        cols = (u >= self.x_min) & (u < self.x_max)
        rows = (v >= self.y_min) & (v < self.y_max)
        return rows[:, None] & cols[None, :]

    def contains_pixels(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        return (
            (uv[:, 0] >= self.x_min) & (uv[:, 0] < self.x_max)
            & (uv[:, 1] >= self.y_min) & (uv[:, 1] < self.y_max)
        )


@dataclass(frozen=True, eq=False)
class OrientedBox3:
    """Yaw-only 3D box in the camera frame.

    ``dims`` is (length, width, height): length runs along the box x axis,
    height along y, width along z.
    """

    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(3)
        d = np.array(self.dims, dtype=np.float64).reshape(3)
        if not np.all(d > 0):
            raise ValueError(f"box dims must be positive, got {d.tolist()}")
        if not (np.all(np.isfinite(c)) and np.isfinite(self.yaw)):
            raise ValueError("box center and yaw must be finite")
        c.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def half_extents(self) -> np.ndarray:
        # (x, y, z) half sizes in the box frame
        l, w, h = self.dims
        return np.array([l, h, w]) / 2.0

    def pose(self) -> Pose:
        """Box-to-camera transform (rotation = yaw about up, translation = center)."""
        return Pose(yaw_rotation(self.yaw), self.center)

    def to_box_frame(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - self.center
        return p @ yaw_rotation(self.yaw)

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return self.pose().apply(signs * self.half_extents)

    def __eq__(self, other):
        if not isinstance(other, OrientedBox3):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and np.array_equal(self.dims, other.dims)
            and self.yaw == other.yaw
        )

    def __repr__(self):
        return f"OrientedBox3(center={self.center.tolist()}, dims={self.dims.tolist()}, yaw={self.yaw!r})"


def contains(box: OrientedBox3, points, tol: float = CONTAINS_TOL) -> np.ndarray | bool:
    """Whether points lie inside (or on) the box, up to ``tol`` meters.

    ``tol`` may be an array broadcasting against ``points`` (one slack per
    point as an (N, 1) column).
    """
    p = np.asarray(points, dtype=np.float64)
    local = box.to_box_frame(p)
    inside = np.all(np.abs(local) <= box.half_extents + np.asarray(tol, dtype=np.float64), axis=-1)
    return bool(inside) if p.ndim == 1 else inside


def enlarge(box: OrientedBox3, factor: float) -> OrientedBox3:
    if factor < 0:
        raise ValueError("enlargement factor must be >= 0")
    return OrientedBox3(box.center, box.dims * (1.0 + factor), box.yaw)


def transform_box(box: OrientedBox3, pose: Pose) -> OrientedBox3:
    """Move a box rigidly; ``pose`` must be a rotation about the up axis."""
    r = pose.rotation
    if not (np.allclose(r[1], [0, 1, 0], atol=1e-9) and np.allclose(r[:, 1], [0, 1, 0], atol=1e-9)):
        raise ValueError("only up-axis rotations keep a box yaw-only")
    extra = float(np.arctan2(r[2, 0], r[0, 0]))
    # rot_y(phi) has r[2,0] = -sin(phi); yaw_rotation(y) = rot_y(-y)
    return OrientedBox3(pose.apply(box.center), box.dims, box.yaw + extra)
