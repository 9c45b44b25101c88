"""Sparse voxel-block-hashed TSDF volume."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRIANGLES
from .geometry import Intrinsics, Pose

# orient every edge from its lower corner so neighbouring cubes produce
# bit-identical vertices on shared edges
_EDGE_CORNERS = np.array(
    [sorted(e, key=lambda c: tuple(CORNER_OFFSETS[c][::-1])) for e in EDGE_CORNERS], dtype=np.int64
)


@dataclass(frozen=True)
class VolumeConfig:
    """Volume resolution and fusion parameters (lengths in meters)."""

    voxel_size: float = 0.0468
    trunc_dist: float | None = None
    max_weight: float = 128.0
    block_side: int = 8
    max_depth: float = 40.0
    near: float = 0.1

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if self.trunc_dist is None:
            object.__setattr__(self, "trunc_dist", 4.0 * self.voxel_size)
        if self.trunc_dist < 2.0 * self.voxel_size - 1e-12:
            raise ValueError("trunc_dist must be at least 2 * voxel_size")
        if int(self.block_side) < 2:
            raise ValueError("block_side must be >= 2")
        if self.max_weight < 1:
            raise ValueError("max_weight must be >= 1")
        if not self.max_depth > 0:
            raise ValueError("max_depth must be positive")

    @property
    def block_length(self) -> float:
        return self.voxel_size * self.block_side


def voxel_coord(points, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def block_key(points, voxel_size: float, block_side: int) -> np.ndarray:
    """Block coordinates of the voxels holding ``points``."""
    return np.floor_divide(voxel_coord(points, voxel_size), block_side)


def pack_keys(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64) + K.KEY_OFFSET
    return c[:, 0] | (c[:, 1] << K.KEY_BITS) | (c[:, 2] << (2 * K.KEY_BITS))


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.stack([(keys >> (s * K.KEY_BITS)) & K.KEY_MASK for s in range(3)], axis=1)
    return out - K.KEY_OFFSET


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.uint8))

    def __len__(self):
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def transformed(self, pose: Pose) -> "Mesh":
        v = pose.apply(self.vertices) if len(self.vertices) else self.vertices.copy()
        return Mesh(v, self.faces.copy(), self.colors.copy())


@dataclass
class IntegrationStats:
    blocks_touched: int = 0
    blocks_allocated: int = 0
    voxels_updated: int = 0
    pixels: int = 0


class TsdfVolume:
    """Sparse TSDF volume made of ``block_side**3`` voxel blocks.

    Blocks live in dense arrays indexed through an open-addressing hash of
    their integer coordinates. Only blocks crossed by a pixel's truncation
    band are allocated and updated. A volume admits a single writer.

    Parameters
    ----------
    config : VolumeConfig
    """

    def __init__(self, config: VolumeConfig | None = None):
        self.config = config or VolumeConfig()
        bs = self.config.block_side
        self._nvox = bs**3
        self._n = 0
        cap = 64
        self._coords = np.zeros((cap, 3), dtype=np.int64)
        self._tsdf = np.zeros((cap, self._nvox), dtype=np.float32)
        self._weight = np.zeros((cap, self._nvox), dtype=np.float32)
        self._color = np.zeros((cap, self._nvox, 3), dtype=np.float32)
        self._hkeys = np.full(256, K.EMPTY, dtype=np.int64)
        self._hvals = np.zeros(256, dtype=np.int64)

    # -- storage ---------------------------------------------------------

    @property
    def allocated_block_count(self) -> int:
        return self._n

    def __len__(self):
        return self._n

    @property
    def block_coords(self) -> np.ndarray:
        return self._coords[: self._n].copy()

    def block_arrays(self):
        """Views (coords, tsdf, weight, color) over stored blocks, in
        allocation order. Voxel ``(x, y, z)`` of a block sits at flat
        index ``(z * bs + y) * bs + x``."""
        n = self._n
        return self._coords[:n], self._tsdf[:n], self._weight[:n], self._color[:n]

    def _reserve(self, extra: int):
        need = self._n + extra
        cap = len(self._coords)
        if need > cap:
            new_cap = max(need, 2 * cap)
            self._coords = _grow(self._coords, new_cap)
            self._tsdf = _grow(self._tsdf, new_cap)
            self._weight = _grow(self._weight, new_cap)
            self._color = _grow(self._color, new_cap)
        if 2 * need > len(self._hkeys):
            size = len(self._hkeys)
            while 2 * need > size:
                size *= 2
            self._rehash(size)

    def _rehash(self, size: int):
        self._hkeys = np.full(size, K.EMPTY, dtype=np.int64)
        self._hvals = np.zeros(size, dtype=np.int64)
        if self._n:
            K.hash_insert_many(
                self._hkeys, self._hvals, pack_keys(self._coords[: self._n]), np.arange(self._n, dtype=np.int64)
            )

    def find_blocks(self, coords) -> np.ndarray:
        """Storage row of each block coordinate, -1 when unallocated."""
        coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
        return K.hash_lookup_many(self._hkeys, self._hvals, pack_keys(coords))

    def allocate(self, coords) -> np.ndarray:
        """Ensure blocks exist; returns their storage rows, aligned with
        ``coords``."""
        keys, inverse = np.unique(pack_keys(np.atleast_2d(np.asarray(coords, dtype=np.int64))), return_inverse=True)
        return self._allocate_packed(keys)[inverse.ravel()]

    def _allocate_packed(self, keys: np.ndarray) -> np.ndarray:
        rows = K.hash_lookup_many(self._hkeys, self._hvals, keys)
        missing = rows < 0
        n_new = int(missing.sum())
        if n_new:
            self._reserve(n_new)
            new_rows = np.arange(self._n, self._n + n_new, dtype=np.int64)
            self._coords[new_rows] = unpack_keys(keys[missing])
            K.hash_insert_many(self._hkeys, self._hvals, keys[missing], new_rows)
            rows[missing] = new_rows
            self._n += n_new
        return rows

    def _drop_unobserved(self, since: int):
        """Remove blocks created at rows >= ``since`` that hold no
        observed voxel."""
        if self._n <= since:
            return
        tail = slice(since, self._n)
        keep = np.any(self._weight[tail] > 0, axis=1)
        if keep.all():
            return
        idx = np.arange(since, self._n)[keep]
        m = len(idx)
        for arr in (self._coords, self._tsdf, self._weight, self._color):
            arr[since : since + m] = arr[idx]
        self._n = since + m
        self._tsdf[self._n :] = 0
        self._weight[self._n :] = 0
        self._color[self._n :] = 0
        self._rehash(len(self._hkeys))

    # -- fusion ----------------------------------------------------------

    def integrate(
        self,
        depth: np.ndarray,
        color: np.ndarray | None,
        k: Intrinsics,
        pose_volume_from_camera: Pose,
    ) -> IntegrationStats:
        """Fuse one depth frame (NaN = invalid) seen from the given pose.

        Color, when given, is an (H, W, 3) uint8 image aligned with depth.
        """
        cfg = self.config
        depth = np.ascontiguousarray(depth, dtype=np.float64)
        if depth.shape != k.shape:
            raise ValueError(f"depth shape {depth.shape} does not match intrinsics {k.shape}")
        use_color = color is not None
        if use_color:
            color = np.ascontiguousarray(color, dtype=np.uint8)
            if color.shape != depth.shape + (3,):
                raise ValueError("color image must be (H, W, 3) and match depth")
        else:
            color = np.zeros((1, 1, 3), dtype=np.uint8)

        stats = IntegrationStats()
        valid = np.isfinite(depth) & (depth > 0) & (depth <= cfg.max_depth)
        stats.pixels = int(valid.sum())
        if not stats.pixels:
            return stats

        p = pose_volume_from_camera
        cand = K.allocation_candidates(
            depth, k.fx, k.fy, k.cx, k.cy, p.rotation, p.translation,
            cfg.trunc_dist, cfg.max_depth, cfg.block_length,
        )
        keys = np.unique(cand)
        before = self._n
        rows = self._allocate_packed(keys)
        stats.blocks_touched = len(rows)

        cam = p.inverse()
        stats.voxels_updated = K.integrate_blocks(
            unpack_keys(keys), rows, self._tsdf, self._weight, self._color, depth, color,
            k.fx, k.fy, k.cx, k.cy, cam.rotation, cam.translation,
            cfg.voxel_size, cfg.block_side, cfg.trunc_dist, float(cfg.max_weight), cfg.max_depth,
            use_color,
        )
        self._drop_unobserved(before)
        stats.blocks_allocated = self._n - before
        return stats

    # -- queries ---------------------------------------------------------

    def query_tsdf(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear (tsdf, weight) at volume-frame points.

        Unobserved samples (any of the 8 neighbours unallocated or with
        zero weight) come back as NaN with weight 0.
        """
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
        values, weights = K.query_many(
            self._hkeys, self._hvals, self._tsdf, self._weight, pts, self.config.voxel_size, self.config.block_side
        )
        if np.asarray(points).ndim == 1:
            return values[0], weights[0]
        return values, weights

    def voxel(self, index) -> tuple[float, float, np.ndarray] | None:
        """(tsdf, weight, color) of the voxel with integer coordinate
        ``index``, or None if its block is not allocated."""
        g = np.asarray(index, dtype=np.int64)
        bs = self.config.block_side
        b = np.floor_divide(g, bs)
        row = int(self.find_blocks(b)[0])
        if row < 0:
            return None
        lx, ly, lz = g - b * bs
        i = (lz * bs + ly) * bs + lx
        return float(self._tsdf[row, i]), float(self._weight[row, i]), self._color[row, i].copy()

    def bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        if not self._n:
            return None
        c = self._coords[: self._n]
        L = self.config.block_length
        return c.min(axis=0) * L, (c.max(axis=0) + 1) * L

    def raycast(
        self, k: Intrinsics, pose_volume_from_camera: Pose, size: tuple[int, int] | None = None
    ) -> np.ndarray:
        """Render z-depth (NaN where no surface) from a camera."""
        h, w = size if size is not None else k.shape
        b = self.bounds()
        if b is None:
            return np.full((h, w), np.nan)
        lo, hi = b
        p = pose_volume_from_camera
        cfg = self.config
        return K.raycast(
            self._hkeys, self._hvals, self._tsdf, self._weight, h, w, k.fx, k.fy, k.cx, k.cy,
            p.rotation, p.translation, cfg.voxel_size, cfg.block_side, cfg.near, cfg.max_depth, lo, hi,
        )

    def extract_mesh(self) -> Mesh:
        """Zero level set as a triangle mesh in the volume frame."""
        if not self._n:
            return Mesh()
        coords, tsdf, weight, color = self.block_arrays()
        order = np.lexsort((coords[:, 0], coords[:, 1], coords[:, 2]))
        verts, cols = K.marching_cubes(
            self._hkeys, self._hvals, np.ascontiguousarray(coords[order]), order.astype(np.int64),
            self._tsdf, self._weight, self._color, self.config.voxel_size, self.config.block_side,
            TRIANGLES, _EDGE_CORNERS, CORNER_OFFSETS,
        )
        if not len(verts):
            return Mesh()
        uniq, first, inverse = np.unique(verts, axis=0, return_index=True, return_inverse=True)
        faces = inverse.reshape(-1, 3).astype(np.int64)
        colors = np.clip(np.rint(cols[first]), 0, 255).astype(np.uint8)
        # drop triangles collapsed by welding (zero-area slivers at corners)
        ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
        return Mesh(uniq, faces[ok], colors)

    # -- inspection ------------------------------------------------------

    def checksum(self) -> str:
        """Digest of all stored voxel data, independent of allocation order."""
        coords, tsdf, weight, color = self.block_arrays()
        order = np.lexsort((coords[:, 0], coords[:, 1], coords[:, 2]))
        h = hashlib.sha256()
        for arr in (coords[order], tsdf[order], weight[order], color[order]):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def observed_voxel_centers(self, max_abs_tsdf: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Centers and tsdf of voxels with weight > 0 and |tsdf| < bound."""
        coords, tsdf, weight, _ = self.block_arrays()
        bs = self.config.block_side
        rows, idx = np.nonzero((weight > 0) & (np.abs(tsdf) < max_abs_tsdf))
        lz, rem = np.divmod(idx, bs * bs)
        ly, lx = np.divmod(rem, bs)
        g = coords[rows] * bs + np.stack([lx, ly, lz], axis=1)
        return (g + 0.5) * self.config.voxel_size, tsdf[rows, idx]


def _grow(arr: np.ndarray, cap: int) -> np.ndarray:
    out = np.zeros((cap,) + arr.shape[1:], dtype=arr.dtype)
    out[: len(arr)] = arr
    return out
