"""Compiled inner loops for the block-hashed TSDF volume.

The hash table is open addressing with linear probing over two flat arrays:
``keys`` (packed block coordinates, ``EMPTY`` for a free slot) and ``vals``
(row index into the dense block storage). Capacity is a power of two.
"""

import numpy as np
from numba import njit

EMPTY = np.int64(-1)
KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
KEY_MASK = (1 << KEY_BITS) - 1


@njit(cache=True, inline="always")
def pack_key(bx, by, bz):
    return (
        np.int64(bx + KEY_OFFSET)
        | (np.int64(by + KEY_OFFSET) << KEY_BITS)
        | (np.int64(bz + KEY_OFFSET) << (2 * KEY_BITS))
    )


@njit(cache=True, inline="always")
def _mix(key):
    z = np.uint64(key)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def hash_lookup(keys, vals, key):
    mask = np.uint64(keys.shape[0] - 1)
    i = np.int64(_mix(key) & mask)
    while True:
        k = keys[i]
        if k == key:
            return vals[i]
        if k == EMPTY:
            return -1
        i = np.int64((np.uint64(i) + np.uint64(1)) & mask)


@njit(cache=True)
def hash_insert_many(keys, vals, new_keys, new_vals):
    mask = np.uint64(keys.shape[0] - 1)
    for j in range(new_keys.shape[0]):
        key = new_keys[j]
        i = np.int64(_mix(key) & mask)
        while keys[i] != EMPTY and keys[i] != key:
            i = np.int64((np.uint64(i) + np.uint64(1)) & mask)
        keys[i] = key
        vals[i] = new_vals[j]


@njit(cache=True)
def hash_lookup_many(keys, vals, query):
    out = np.empty(query.shape[0], dtype=np.int64)
    for j in range(query.shape[0]):
        out[j] = hash_lookup(keys, vals, query[j])
    return out


@njit(cache=True)
def _segment_cells(p0, p1, block_len, out, n):
    """Amanatides-Woo walk over block cells touched by segment p0->p1.

    Writes packed keys to ``out`` starting at ``n`` (when ``out`` is not
    empty) and returns the new count.
    """
    cell = np.empty(3, dtype=np.int64)
    end = np.empty(3, dtype=np.int64)
    step = np.zeros(3, dtype=np.int64)
    tmax = np.full(3, np.inf)
    tdelta = np.full(3, np.inf)
    for a in range(3):
        cell[a] = np.int64(np.floor(p0[a] / block_len))
        end[a] = np.int64(np.floor(p1[a] / block_len))
        d = p1[a] - p0[a]
        if d > 0:
            step[a] = 1
            tmax[a] = ((cell[a] + 1) * block_len - p0[a]) / d
            tdelta[a] = block_len / d
        elif d < 0:
            step[a] = -1
            tmax[a] = (cell[a] * block_len - p0[a]) / d
            tdelta[a] = -block_len / d
    write = out.shape[0] > 0
    if write:
        out[n] = pack_key(cell[0], cell[1], cell[2])
    n += 1
    limit = 3 + abs(end[0] - cell[0]) + abs(end[1] - cell[1]) + abs(end[2] - cell[2])
    for _ in range(limit):
        if cell[0] == end[0] and cell[1] == end[1] and cell[2] == end[2]:
            break
        a = 0
        if tmax[1] < tmax[a]:
            a = 1
        if tmax[2] < tmax[a]:
            a = 2
        if tmax[a] > 1.0:
            break
        cell[a] += step[a]
        tmax[a] += tdelta[a]
        if write:
            out[n] = pack_key(cell[0], cell[1], cell[2])
        n += 1
    return n


@njit(cache=True)
def allocation_candidates(depth, fx, fy, cx, cy, rot, trans, trunc, max_depth, block_len):
    """Packed keys (with repeats) of blocks crossed by every pixel's
    truncation segment, expressed in the volume frame."""
    h, w = depth.shape
    p0 = np.empty(3)
    p1 = np.empty(3)
    empty = np.empty(0, dtype=np.int64)
    out = empty
    for rep in range(2):
        n = 0
        for v in range(h):
            for u in range(w):
                d = depth[v, u]
                if not (d > 0.0) or d > max_depth or not np.isfinite(d):
                    continue
                rx = (u - cx) / fx
                ry = (v - cy) / fy
                za = max(d - trunc, 0.0)
                zb = d + trunc
                for a in range(3):
                    p0[a] = rot[a, 0] * rx * za + rot[a, 1] * ry * za + rot[a, 2] * za + trans[a]
                    p1[a] = rot[a, 0] * rx * zb + rot[a, 1] * ry * zb + rot[a, 2] * zb + trans[a]
                n = _segment_cells(p0, p1, block_len, out, n)
        if rep == 0:
            out = np.empty(n, dtype=np.int64)
    return out


@njit(cache=True)
def integrate_blocks(
    coords, slots, tsdf, weight, color, depth, rgb,
    fx, fy, cx, cy, rot, trans, voxel_size, block_side, trunc, max_weight, max_depth,
    use_color,
):
    """Running-average update of every voxel in the listed blocks.

    ``rot``/``trans`` map volume-frame points into the camera frame.
    Returns the number of voxel updates performed.
    """
    h, w = depth.shape
    bs = block_side
    updates = 0
    for b in range(coords.shape[0]):
        slot = slots[b]
        for lz in range(bs):
            for ly in range(bs):
                for lx in range(bs):
                    gx = (coords[b, 0] * bs + lx + 0.5) * voxel_size
                    gy = (coords[b, 1] * bs + ly + 0.5) * voxel_size
                    gz = (coords[b, 2] * bs + lz + 0.5) * voxel_size
                    zc = rot[2, 0] * gx + rot[2, 1] * gy + rot[2, 2] * gz + trans[2]
                    if zc <= 0.0:
                        continue
                    xc = rot[0, 0] * gx + rot[0, 1] * gy + rot[0, 2] * gz + trans[0]
                    yc = rot[1, 0] * gx + rot[1, 1] * gy + rot[1, 2] * gz + trans[1]
                    uf = fx * xc / zc + cx
                    vf = fy * yc / zc + cy
                    u = int(np.floor(uf + 0.5))
                    v = int(np.floor(vf + 0.5))
                    if u < 0 or v < 0 or u >= w or v >= h:
                        continue
                    d = depth[v, u]
                    if not (d > 0.0) or d > max_depth or not np.isfinite(d):
                        continue
                    sdf = d - zc
                    if sdf < -trunc:
                        continue
                    s = sdf / trunc
                    if s > 1.0:
                        s = 1.0
                    elif s < -1.0:
                        s = -1.0
                    # round the sample to storage precision so repeated equal
                    # samples leave the stored value bit-identical
                    s = np.float64(np.float32(s))
                    i = (lz * bs + ly) * bs + lx
                    wold = np.float64(weight[slot, i])
                    wsum = wold + 1.0
                    tsdf[slot, i] = np.float32((np.float64(tsdf[slot, i]) * wold + s) / wsum)
                    if use_color:
                        for c in range(3):
                            cn = np.float64(rgb[v, u, c])
                            color[slot, i, c] = np.float32((np.float64(color[slot, i, c]) * wold + cn) / wsum)
                    weight[slot, i] = np.float32(min(wsum, max_weight))
                    updates += 1
    return updates


@njit(cache=True, inline="always")
def _voxel_slot(keys, vals, gx, gy, gz, bs):
    bx = gx // bs
    by = gy // bs
    bz = gz // bs
    slot = hash_lookup(keys, vals, pack_key(bx, by, bz))
    i = ((gz - bz * bs) * bs + (gy - by * bs)) * bs + (gx - bx * bs)
    return slot, i


@njit(cache=True)
def _trilinear(keys, vals, tsdf, weight, px, py, pz, voxel_size, bs):
    """Trilinear TSDF at a point; returns (value, weight, ok)."""
    fx_ = px / voxel_size - 0.5
    fy_ = py / voxel_size - 0.5
    fz_ = pz / voxel_size - 0.5
    x0 = np.int64(np.floor(fx_))
    y0 = np.int64(np.floor(fy_))
    z0 = np.int64(np.floor(fz_))
    ax = fx_ - x0
    ay = fy_ - y0
    az = fz_ - z0
    val = 0.0
    wsum = 0.0
    bx = x0 // bs
    by = y0 // bs
    bz = z0 // bs
    lx = x0 - bx * bs
    ly = y0 - by * bs
    lz = z0 - bz * bs
    if lx < bs - 1 and ly < bs - 1 and lz < bs - 1:
        # all eight corners share one block: a single hash probe
        slot = hash_lookup(keys, vals, pack_key(bx, by, bz))
        if slot < 0:
            return 0.0, 0.0, False
        for dz in range(2):
            cz = az if dz == 1 else 1.0 - az
            for dy in range(2):
                cy_ = ay if dy == 1 else 1.0 - ay
                for dx in range(2):
                    cx_ = ax if dx == 1 else 1.0 - ax
                    i = ((lz + dz) * bs + ly + dy) * bs + lx + dx
                    wv = weight[slot, i]
                    if wv <= 0.0:
                        return 0.0, 0.0, False
                    c = cx_ * cy_ * cz
                    val += c * tsdf[slot, i]
                    wsum += c * wv
        return val, wsum, True
    for dz in range(2):
        cz = az if dz == 1 else 1.0 - az
        for dy in range(2):
            cy_ = ay if dy == 1 else 1.0 - ay
            for dx in range(2):
                cx_ = ax if dx == 1 else 1.0 - ax
                slot, i = _voxel_slot(keys, vals, x0 + dx, y0 + dy, z0 + dz, bs)
                if slot < 0:
                    return 0.0, 0.0, False
                wv = weight[slot, i]
                if wv <= 0.0:
                    return 0.0, 0.0, False
                c = cx_ * cy_ * cz
                val += c * tsdf[slot, i]
                wsum += c * wv
    return val, wsum, True


@njit(cache=True)
def query_many(keys, vals, tsdf, weight, points, voxel_size, bs):
    n = points.shape[0]
    values = np.full(n, np.nan)
    weights = np.zeros(n)
    for j in range(n):
        val, wv, ok = _trilinear(keys, vals, tsdf, weight, points[j, 0], points[j, 1], points[j, 2], voxel_size, bs)
        if ok:
            values[j] = val
            weights[j] = wv
    return values, weights


@njit(cache=True)
def raycast(
    keys, vals, tsdf, weight, h, w, fx, fy, cx, cy, rot, trans,
    voxel_size, bs, near, far, lo, hi,
):
    """March every pixel ray through the volume, returning z-depth of the
    first + to - zero crossing (NaN where none).

    ``rot``/``trans`` map camera-frame points into the volume frame; ``lo``
    and ``hi`` bound the allocated blocks in the volume frame.
    """
    out = np.full((h, w), np.nan)
    block_len = voxel_size * bs
    eps = 1e-4 * voxel_size
    for v in range(h):
        for u in range(w):
            rx = (u - cx) / fx
            ry = (v - cy) / fy
            dx = rot[0, 0] * rx + rot[0, 1] * ry + rot[0, 2]
            dy = rot[1, 0] * rx + rot[1, 1] * ry + rot[1, 2]
            dz = rot[2, 0] * rx + rot[2, 1] * ry + rot[2, 2]
            norm = np.sqrt(dx * dx + dy * dy + dz * dz)
            # clip [near, far] to the allocated bounding box (slab test)
            t0 = near
            t1 = far
            for a in range(3):
                o = trans[a]
                d = dx if a == 0 else (dy if a == 1 else dz)
                if d == 0.0:
                    if o < lo[a] or o > hi[a]:
                        t0 = 1.0
                        t1 = 0.0
                else:
                    ta = (lo[a] - o) / d
                    tb = (hi[a] - o) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    t0 = max(t0, ta)
                    t1 = min(t1, tb)
            if t0 > t1:
                continue
            step = voxel_size / norm
            t = t0
            prev_ok = False
            prev_t = 0.0
            prev_val = 0.0
            while t <= t1:
                px = trans[0] + dx * t
                py = trans[1] + dy * t
                pz = trans[2] + dz * t
                bx = np.int64(np.floor(px / block_len))
                by = np.int64(np.floor(py / block_len))
                bz = np.int64(np.floor(pz / block_len))
                if hash_lookup(keys, vals, pack_key(bx, by, bz)) < 0:
                    # jump to where the ray leaves this empty block
                    texit = np.inf
                    for a in range(3):
                        d = dx if a == 0 else (dy if a == 1 else dz)
                        p = px if a == 0 else (py if a == 1 else pz)
                        bc = bx if a == 0 else (by if a == 1 else bz)
                        if d > 0.0:
                            texit = min(texit, ((bc + 1) * block_len - p) / d)
                        elif d < 0.0:
                            texit = min(texit, (bc * block_len - p) / d)
                    t += max(texit, 0.0) + eps
                    prev_ok = False
                    continue
                val, wv, ok = _trilinear(keys, vals, tsdf, weight, px, py, pz, voxel_size, bs)
                if ok:
                    if prev_ok and prev_val > 0.0 and val <= 0.0:
                        out[v, u] = prev_t + (t - prev_t) * prev_val / (prev_val - val)
                        break
                    prev_val = val
                    prev_t = t
                prev_ok = ok
                t += step
    return out


@njit(cache=True)
def marching_cubes(keys, vals, coords, slots, tsdf, weight, color, voxel_size, bs, tri_table, edge_corners, corner_offsets):
    """Classic marching cubes over the cubes owned by each block.

    A cube is owned by the block holding its minimum corner. Cubes with any
    unobserved corner are skipped. Returns per-triangle vertices (3 per
    triangle, unshared) and colors.
    """
    vx = np.empty(8, dtype=np.float64)
    cols = np.empty((8, 3), dtype=np.float64)
    out_v = np.empty((0, 3))
    out_c = np.empty((0, 3))
    for rep in range(2):
        n = 0
        for b in range(coords.shape[0]):
            for lz in range(bs):
                for ly in range(bs):
                    for lx in range(bs):
                        gx = coords[b, 0] * bs + lx
                        gy = coords[b, 1] * bs + ly
                        gz = coords[b, 2] * bs + lz
                        ok = True
                        cube = 0
                        for c in range(8):
                            slot, i = _voxel_slot(
                                keys, vals,
                                gx + corner_offsets[c, 0], gy + corner_offsets[c, 1], gz + corner_offsets[c, 2], bs,
                            )
                            if slot < 0 or weight[slot, i] <= 0.0:
                                ok = False
                                break
                            vx[c] = tsdf[slot, i]
                            for k in range(3):
                                cols[c, k] = color[slot, i, k]
                            if vx[c] < 0.0:
                                cube |= 1 << c
                        if not ok or cube == 0 or cube == 255:
                            continue
                        j = 0
                        while tri_table[cube, j] >= 0:
                            if rep == 1:
                                e = tri_table[cube, j]
                                a = edge_corners[e, 0]
                                z = edge_corners[e, 1]
                                denom = vx[z] - vx[a]
                                f = 0.5 if denom == 0.0 else (0.0 - vx[a]) / denom
                                for k in range(3):
                                    pa = (corner_offsets[a, k] + (gx if k == 0 else (gy if k == 1 else gz)) + 0.5) * voxel_size
                                    pz_ = (corner_offsets[z, k] + (gx if k == 0 else (gy if k == 1 else gz)) + 0.5) * voxel_size
                                    out_v[n, k] = pa + f * (pz_ - pa)
                                    out_c[n, k] = cols[a, k] + f * (cols[z, k] - cols[a, k])
                            n += 1
                            j += 1
        if rep == 0:
            out_v = np.empty((n, 3))
            out_c = np.empty((n, 3))
    return out_v, out_c
