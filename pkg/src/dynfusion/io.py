"""Dataset layout, binary/text file formats and PLY mesh export.

Depth/disparity (``.dfdm``)::

    b"DFDM" | u32 width | u32 height | u8 kind | 3 zero bytes | float32[h*w]

little-endian, row-major, top-left origin; 0.0 or non-finite = invalid.
Kind 0 is depth in meters, kind 1 disparity in pixels.

Lidar points (``.dfpt``)::

    b"DFPT" | u32 count | float32[count*3]   (x, y, z camera frame, meters)

Camera pose (``.txt``): 12 numbers, row-major 3x4 camera-to-world matrix.
Detections (``.json``): array of objects with ``box2``, ``box3``, ``score``,
``class`` and optional ``track_id``. Color: binary PPM (``P6``, maxval 255).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decomposition import Detection
from .dynamic_map import FramePacket
from .geometry import Box2, Intrinsics, InvalidPoseError, OrientedBox3, Pose, disparity_to_depth
from .tsdf import Mesh

DEPTH_MAGIC = b"DFDM"
POINTS_MAGIC = b"DFPT"
KIND_DEPTH = 0
KIND_DISPARITY = 1
_DEPTH_HEADER = struct.Struct("<4sIIB3s")
_POINTS_HEADER = struct.Struct("<4sI")
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "dynfusion-dataset/1"


class DatasetError(Exception):
    """Base class for ingestion errors; message names the file and offset."""

    def __init__(self, path, message, offset=None):
        self.path = str(path)
        self.offset = offset
        where = f"{self.path}" + (f" @ byte {offset}" if offset is not None else "")
        super().__init__(f"{where}: {message}")


class MissingFileError(DatasetError):
    pass


class FormatError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class PoseFileError(DatasetError):
    pass


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise MissingFileError(path, "file not found") from None


def _write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


# -- depth / disparity ------------------------------------------------------


def write_depth(path, values: np.ndarray, kind: int = KIND_DEPTH):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("depth map must be 2D")
    h, w = values.shape
    out = np.where(np.isfinite(values) & (values > 0), values, 0.0).astype("<f4")
    _write_bytes(path, _DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, kind, b"\0\0\0") + out.tobytes())


def read_depth(path, expected_shape: tuple[int, int] | None = None) -> tuple[np.ndarray, int]:
    """Returns (float64 array with NaN for invalid pixels, kind)."""
    data = _read_bytes(path)
    if len(data) < _DEPTH_HEADER.size:
        raise FormatError(path, f"truncated header ({len(data)} bytes)", 0)
    magic, w, h, kind, reserved = _DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}, expected {DEPTH_MAGIC!r}", 0)
    if kind not in (KIND_DEPTH, KIND_DISPARITY):
        raise FormatError(path, f"unknown map kind {kind}", 12)
    if reserved != b"\0\0\0":
        raise FormatError(path, "reserved header bytes are not zero", 13)
    if w == 0 or h == 0:
        raise FormatError(path, f"empty map {w}x{h}", 4)
    payload = len(data) - _DEPTH_HEADER.size
    if payload != 4 * w * h:
        raise DimensionMismatchError(
            path, f"header says {w}x{h} ({4 * w * h} data bytes) but file has {payload}", _DEPTH_HEADER.size
        )
    if expected_shape is not None and (h, w) != tuple(expected_shape):
        raise DimensionMismatchError(path, f"map is {w}x{h}, expected {expected_shape[1]}x{expected_shape[0]}", 4)
    arr = np.frombuffer(data, dtype="<f4", offset=_DEPTH_HEADER.size).astype(np.float64).reshape(h, w)
    arr[~(np.isfinite(arr) & (arr > 0))] = np.nan
    return arr, kind


# -- lidar points -----------------------------------------------------------


def write_points(path, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3).astype("<f4")
    _write_bytes(path, _POINTS_HEADER.pack(POINTS_MAGIC, len(pts)) + pts.tobytes())


def read_points(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < _POINTS_HEADER.size:
        raise FormatError(path, f"truncated header ({len(data)} bytes)", 0)
    magic, count = _POINTS_HEADER.unpack_from(data)
    if magic != POINTS_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}, expected {POINTS_MAGIC!r}", 0)
    payload = len(data) - _POINTS_HEADER.size
    if payload != 12 * count:
        raise DimensionMismatchError(path, f"header says {count} points but payload has {payload} bytes", _POINTS_HEADER.size)
    pts = np.frombuffer(data, dtype="<f4", offset=_POINTS_HEADER.size).astype(np.float64).reshape(count, 3)
    if not np.all(np.isfinite(pts)):
        bad = int(np.argmax(~np.all(np.isfinite(pts), axis=1)))
        raise FormatError(path, f"point {bad} is not finite", _POINTS_HEADER.size + 12 * bad)
    return pts


# -- poses ------------------------------------------------------------------


def format_pose(pose: Pose) -> str:
    m = pose.matrix()[:3]
    return " ".join(repr(float(x)) for x in m.ravel()) + "\n"


def write_pose(path, pose: Pose):
    _write_bytes(path, format_pose(pose).encode("ascii"))


def parse_pose(text: str, path="<pose>") -> Pose:
    tokens = text.split()
    if len(tokens) != 12:
        raise FormatError(path, f"expected 12 numbers, found {len(tokens)}", 0)
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(path, f"non-numeric pose entry ({exc})", 0) from None
    try:
        return Pose.from_matrix(np.array(vals).reshape(3, 4))
    except InvalidPoseError as exc:
        raise PoseFileError(path, f"invalid pose matrix: {exc}", 0) from None


def read_pose(path) -> Pose:
    data = _read_bytes(path)
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(path, "pose file is not ASCII text", exc.start) from None
    return parse_pose(text, path)


# -- detections -------------------------------------------------------------


def detections_to_json(detections) -> str:
    items = []
    for tid, det in detections:
        item = {"box2": [float(x) for x in det.box2.as_list()]}
        if det.box3 is None:
            item["box3"] = None
        else:
            item["box3"] = {
                "center": [float(x) for x in det.box3.center],
                "dims": [float(x) for x in det.box3.dims],
                "yaw": float(det.box3.yaw),
            }
        item["score"] = float(det.score)
        item["class"] = det.class_label
        if tid is not None:
            item["track_id"] = int(tid)
        items.append(item)
    return json.dumps(items, indent=1) + "\n"


def write_detections(path, detections):
    _write_bytes(path, detections_to_json(detections).encode("utf-8"))


def read_detections(path) -> list:
    data = _read_bytes(path)
    try:
        items = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError(path, "detections file is not UTF-8", exc.start) from None
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"malformed JSON: {exc.msg}", exc.pos) from None
    if not isinstance(items, list):
        raise FormatError(path, "top-level value must be an array", 0)
    out = []
    for i, item in enumerate(items):
        try:
            box2 = Box2(*[float(x) for x in item["box2"]])
            b3 = item.get("box3")
            if b3 is None:
                box3 = None
            else:
                if "rotation" in b3 or len(b3.get("center", [])) != 3 or len(b3.get("dims", [])) != 3:
                    raise ValueError("box3 must be {center:[3], dims:[3], yaw} (yaw-only)")
                box3 = OrientedBox3(b3["center"], b3["dims"], float(b3["yaw"]))
            tid = item.get("track_id")
            if tid is not None and (not isinstance(tid, int) or tid < 0):
                raise ValueError(f"track_id must be a non-negative integer, got {tid!r}")
            det = Detection(box2, box3, float(item.get("score", 1.0)), str(item.get("class", "car")))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(path, f"detection {i}: {exc}") from None
        out.append((tid, det))
    return out


# -- color ------------------------------------------------------------------


def write_ppm(path, image: np.ndarray):
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("color image must be (H, W, 3)")
    h, w, _ = img.shape
    _write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path, expected_shape: tuple[int, int] | None = None) -> np.ndarray:
    data = _read_bytes(path)
    if data[:2] != b"P6":
        raise FormatError(path, f"bad magic {data[:2]!r}, expected b'P6'", 0)
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, "truncated PPM header", pos)
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before the raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(path, "non-numeric PPM header", 2) from None
    if maxval != 255:
        raise FormatError(path, f"only 8-bit PPM is supported (maxval {maxval})", 2)
    if len(data) - pos != w * h * 3:
        raise DimensionMismatchError(path, f"header says {w}x{h} but raster has {len(data) - pos} bytes", pos)
    if expected_shape is not None and (h, w) != tuple(expected_shape):
        raise DimensionMismatchError(path, f"image is {w}x{h}, expected {expected_shape[1]}x{expected_shape[0]}", 2)
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w, 3).copy()


# -- meshes -----------------------------------------------------------------


def mesh_to_ply(mesh: Mesh) -> str:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    colors = mesh.colors if len(mesh.colors) == len(mesh.vertices) else np.full((len(mesh.vertices), 3), 200, np.uint8)
    for (x, y, z), (r, g, b) in zip(mesh.vertices, colors):
        lines.append(f"{x:.6f} {y:.6f} {z:.6f} {int(r)} {int(g)} {int(b)}")
    for i, j, k in mesh.faces:
        lines.append(f"3 {int(i)} {int(j)} {int(k)}")
    return "\n".join(lines) + "\n"


def write_mesh(mesh: Mesh, path):
    try:
        _write_bytes(path, mesh_to_ply(mesh).encode("ascii"))
    except OSError as exc:
        raise OSError(f"cannot write mesh to {path}: {exc.strerror or exc}") from exc


def read_mesh(path) -> Mesh:
    data = _read_bytes(path)
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(path, "PLY file is not ASCII", exc.start) from None
    lines = text.split("\n")
    if not lines or lines[0] != "ply":
        raise FormatError(path, "not a PLY file", 0)
    nv = nf = None
    i = 1
    while i < len(lines) and lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:1] == ["format"] and parts[1:2] != ["ascii"]:
            raise FormatError(path, "only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        i += 1
    if nv is None or nf is None or i == len(lines):
        raise FormatError(path, "incomplete PLY header")
    body = lines[i + 1 :]
    verts = np.zeros((nv, 3))
    cols = np.zeros((nv, 3), dtype=np.uint8)
    for j in range(nv):
        p = body[j].split()
        verts[j] = [float(v) for v in p[:3]]
        cols[j] = [int(v) for v in p[3:6]]
    faces = np.zeros((nf, 3), dtype=np.int64)
    for j in range(nf):
        p = body[nv + j].split()
        if p[0] != "3":
            raise FormatError(path, f"face {j} is not a triangle")
        faces[j] = [int(v) for v in p[1:4]]
    return Mesh(verts, faces, cols)


# -- manifest / dataset -----------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    intrinsics: Intrinsics
    frames: list = field(default_factory=list)  # per-frame dict of relative file names
    input_kind: str = "depth"
    track_ids: bool = True
    name: str = ""

    def __len__(self):
        return len(self.frames)

    def path(self, index: int, key: str) -> Path | None:
        rel = self.frames[index].get(key)
        return None if rel is None else self.root / rel

    def as_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "name": self.name,
            "intrinsics": self.intrinsics.as_dict(),
            "input_kind": self.input_kind,
            "track_ids": self.track_ids,
            "frames": self.frames,
        }


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    data = _read_bytes(path)
    try:
        raw = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, f"malformed manifest: {exc}", getattr(exc, "pos", None)) from None
    if raw.get("format") != MANIFEST_FORMAT:
        raise FormatError(path, f"unknown manifest format {raw.get('format')!r}")
    try:
        k = Intrinsics(**raw["intrinsics"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, f"bad intrinsics: {exc}") from None
    kind = raw.get("input_kind", "depth")
    if kind not in ("depth", "disparity"):
        raise FormatError(path, f"input_kind must be depth or disparity, got {kind!r}")
    frames = raw.get("frames", [])
    for i, fr in enumerate(frames):
        if fr.get("index") != i:
            raise FormatError(path, f"frame entries must be contiguous from 0; entry {i} has index {fr.get('index')!r}")
    m = DatasetManifest(path.parent, k, frames, kind, bool(raw.get("track_ids", True)), raw.get("name") or path.parent.name)
    if check_files:
        for i in range(len(frames)):
            for key in ("depth", "pose"):
                if frames[i].get(key) is None:
                    raise FormatError(path, f"frame {i} has no {key} file")
            for key in ("depth", "pose", "color", "detections", "lidar"):
                p = m.path(i, key)
                if p is not None and not p.exists():
                    raise MissingFileError(p, f"referenced by frame {i} of {path} but missing")
    return m


def load_frame(manifest: DatasetManifest, index: int) -> FramePacket:
    """Parse and validate every file of one frame."""
    if not 0 <= index < len(manifest):
        raise IndexError(f"frame {index} outside [0, {len(manifest)})")
    k = manifest.intrinsics
    dpath = manifest.path(index, "depth")
    values, kind = read_depth(dpath, k.shape)
    expected = KIND_DISPARITY if manifest.input_kind == "disparity" else KIND_DEPTH
    if kind != expected:
        raise FormatError(dpath, f"map kind {kind} does not match manifest input_kind {manifest.input_kind!r}", 12)
    depth = disparity_to_depth(values, k) if kind == KIND_DISPARITY else values
    cpath = manifest.path(index, "color")
    color = read_ppm(cpath, k.shape) if cpath is not None else None
    pose = read_pose(manifest.path(index, "pose"))
    det_path = manifest.path(index, "detections")
    dets = read_detections(det_path) if det_path is not None else []
    if not manifest.track_ids:
        dets = [(None, d) for _, d in dets]
    lpath = manifest.path(index, "lidar")
    lidar = read_points(lpath) if lpath is not None else None
    return FramePacket(index, depth, color, pose, dets, lidar)


def iter_frames(manifest: DatasetManifest):
    for i in range(len(manifest)):
        yield load_frame(manifest, i)


def write_dataset(packets, k: Intrinsics, out_dir, input_kind: str = "depth", track_ids: bool = True, name: str = "") -> DatasetManifest:
    """Write packets (frame indices 0..N-1) in the standard layout."""
    out = Path(out_dir)
    frames = []
    for i, p in enumerate(packets):
        if p.frame_index != i:
            raise ValueError("packets must be numbered contiguously from 0")
        stem = f"{i:06d}"
        entry = {"index": i, "depth": f"depth/{stem}.dfdm", "pose": f"pose/{stem}.txt"}
        if input_kind == "disparity":
            with np.errstate(divide="ignore"):
                disp = k.baseline * k.fx / np.asarray(p.depth, dtype=np.float64)
            write_depth(out / entry["depth"], disp, KIND_DISPARITY)
        else:
            write_depth(out / entry["depth"], p.depth, KIND_DEPTH)
        write_pose(out / entry["pose"], p.camera_pose)
        if p.color is not None:
            entry["color"] = f"color/{stem}.ppm"
            write_ppm(out / entry["color"], p.color)
        entry["detections"] = f"detections/{stem}.json"
        dets = p.detections if track_ids else [(None, d) for _, d in p.detections]
        write_detections(out / entry["detections"], dets)
        if p.lidar_points is not None:
            entry["lidar"] = f"lidar/{stem}.dfpt"
            write_points(out / entry["lidar"], p.lidar_points)
        frames.append(entry)
    m = DatasetManifest(out, k, frames, input_kind, track_ids, name or out.name)
    _write_bytes(out / MANIFEST_NAME, (json.dumps(m.as_dict(), indent=1) + "\n").encode("utf-8"))
    return m


# -- key=value config -------------------------------------------------------


def read_config(path) -> dict:
    """Parse a UTF-8 ``key = value`` file; ``#`` starts a comment."""
    data = _read_bytes(path)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(path, "config is not UTF-8", exc.start) from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(path, f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(value)
    return out


def _coerce(value: str):
    low = value.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            v = cast(value)
            return v if cast is int or math.isfinite(v) else value
        except ValueError:
            pass
    return value


def write_json(path, obj):
    _write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def pose_to_list(pose: Pose) -> list[float]:
    return [float(x) for x in pose.matrix()[:3].ravel()]


def pose_from_list(values) -> Pose:
    return Pose.from_matrix(np.asarray(values, dtype=np.float64).reshape(3, 4))


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
