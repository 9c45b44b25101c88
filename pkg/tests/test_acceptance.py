"""Acceptance suite: one verdict line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdicts are
repeated in the "acceptance criteria" section of the terminal summary.
"""

import itertools
import math
import time

import numpy as np
import pytest

from dynfusion import io
from dynfusion.decomposition import Detection, Strategy, decompose
from dynfusion.dynamic_map import DynamicMap, MapConfig
from dynfusion.evaluation import WHOLE_IMAGE, WITHIN_BOXES, EvalConfig, evaluate_sequence, mre
from dynfusion.geometry import (
    Box2,
    Intrinsics,
    OrientedBox3,
    Pose,
    backproject,
    compose,
    contains,
    invert,
    project,
    rot_y,
    transform_box,
    yaw_rotation,
)
from dynfusion.synthetic import Body, SceneScript, default_intrinsics, default_scene, render_frame
from dynfusion.tracking import Track, associate, box_iou
from dynfusion.tsdf import TsdfVolume, VolumeConfig

CAPS = (10.0, 20.0, 30.0, 40.0)


def fuse_and_score(script, mode):
    dmap = DynamicMap(script.intrinsics, MapConfig(mode=mode))
    renders, packets = {}, []
    for t in range(script.frames):
        p = render_frame(script, t).packet
        dmap.process_frame(p)
        renders[t] = dmap.render_live_view(t)[0]
        packets.append(p)
    return dmap, evaluate_sequence(renders, packets, script.intrinsics, EvalConfig(CAPS))


def test_01_ghost_reduction(record):
    t0 = time.perf_counter()
    script = default_scene()
    _, dyn = fuse_and_score(script, "dynamic")
    _, st = fuse_and_score(script, "static")
    elapsed = time.perf_counter() - t0
    rows = []
    ok = elapsed < 60
    for cap in CAPS:
        d, md = dyn.aggregate(cap, WITHIN_BOXES)
        s, ms = st.aggregate(cap, WITHIN_BOXES)
        ok &= d is not None and s is not None and d <= 0.5 * s and d < 0.05
        rows.append(f"{cap:g}m dyn {d:.4f} ({md}) vs static {s:.4f} ({ms})")
    assert record(1, "ghost-artifact reduction", ok, "; ".join(rows) + f"; {elapsed:.1f}s")


def test_02_static_parity(record):
    script = default_scene(moving=False)
    _, dyn = fuse_and_score(script, "dynamic")
    _, st = fuse_and_score(script, "static")
    diffs = [abs(dyn.aggregate(c, WHOLE_IMAGE)[0] - st.aggregate(c, WHOLE_IMAGE)[0]) for c in CAPS]
    ok = all(d < 0.01 for d in diffs)
    assert record(2, "static-scene parity", ok, "max |diff| %.5f" % max(diffs))


def test_03_plane_surface_accuracy(record):
    t0 = time.perf_counter()
    k = default_intrinsics()
    cfg = VolumeConfig(voxel_size=0.0468)
    vol = TsdfVolume(cfg)
    vol.integrate(np.full(k.shape, 2.0), None, k, Pose.identity())
    mesh = vol.extract_mesh()
    rms = float(np.sqrt(np.mean((mesh.vertices[:, 2] - 2.0) ** 2)))
    depth = vol.raycast(k, Pose.identity())
    med = float(np.nanmedian(np.abs(depth - 2.0)))
    elapsed = time.perf_counter() - t0
    ok = len(mesh.vertices) > 0 and rms < cfg.voxel_size / 2 and med < cfg.voxel_size and elapsed < 5
    assert record(3, "TSDF surface accuracy", ok, f"mesh RMS {rms:.2e} m, raycast median {med:.2e} m, {elapsed:.2f}s")


def test_04_fusion_invariants(record):
    rng = np.random.default_rng(20240607)
    k = Intrinsics(24.0, 24.0, 12.0, 9.0, 24, 18)
    cfg = VolumeConfig(voxel_size=0.08, max_weight=6)
    per_pixel = math.ceil(2 * cfg.trunc_dist / cfg.block_length + 2)
    failures = []
    frames = 0
    for seq in range(100):
        vol = TsdfVolume(cfg)
        prev = {}
        for _ in range(10):
            depth = rng.uniform(0.4, 8.0, k.shape)
            depth[rng.random(k.shape) < rng.uniform(0, 0.7)] = np.nan
            pose = Pose(rot_y(rng.uniform(-0.6, 0.6)) @ yaw_rotation(0.0), rng.uniform(-1, 1, 3))
            s = int(np.isfinite(depth).sum())
            stats = vol.integrate(depth, None, k, pose)
            frames += 1
            coords, tsdf, weight, _ = vol.block_arrays()
            if np.any(np.abs(tsdf) > 1) or np.any(weight < 0) or np.any(weight > cfg.max_weight):
                failures.append(f"bounds seq {seq}")
            cur = {tuple(c): w.copy() for c, w in zip(coords, weight)}
            if any(key not in cur or np.any(cur[key] < w) for key, w in prev.items()):
                failures.append(f"weight decreased seq {seq}")
            prev = cur
            if stats.blocks_allocated > s * per_pixel:
                failures.append(f"sparsity seq {seq}")

            single = TsdfVolume(cfg)
            single.integrate(depth, None, k, pose)
            if single.allocated_block_count > s * per_pixel:
                failures.append(f"single-frame sparsity seq {seq}")
            _, t1, w1, _ = single.block_arrays()
            t1, w1 = t1.copy(), w1.copy()
            single.integrate(depth, None, k, pose)
            _, t2, w2, _ = single.block_arrays()
            if not (np.array_equal(t1, t2) and np.array_equal(w2[w1 > 0], np.minimum(w1[w1 > 0] + 1, cfg.max_weight))):
                failures.append(f"idempotency seq {seq}")
    ok = frames == 1000 and not failures
    assert record(4, "fusion invariants over 1000 frames", ok, f"{frames} frames, {len(failures)} violations {failures[:3]}")


def test_05_drift_independence(record):
    t0 = time.perf_counter()
    script = default_scene()
    drift = Pose(rot_y(0.35), np.array([12.0, -0.4, -30.0]))
    maps = []
    for perturbed in (False, True):
        dmap = DynamicMap(script.intrinsics)
        for t in range(script.frames):
            p = render_frame(script, t).packet
            if perturbed:
                p.camera_pose = compose(drift, p.camera_pose)
            dmap.process_frame(p)
        maps.append(dmap)
    a, b = maps
    same = sorted(a.objects) == sorted(b.objects) and all(
        a.objects[t].volume.checksum() == b.objects[t].volume.checksum() for t in a.objects
    )
    bg_changed = a.background.checksum() != b.background.checksum()
    elapsed = time.perf_counter() - t0
    ok = same and bg_changed and len(a.objects) == 2 and elapsed < 30
    assert record(5, "drift independence", ok, f"{len(a.objects)} object volumes identical={same}, background changed={bg_changed}, {elapsed:.1f}s")


def brute_force_mre(pred, pts, k, cap):
    total, count = 0.0, 0
    h, w = len(pred), len(pred[0])
    for x, y, z in pts:
        if z <= 0 or z > cap:
            continue
        u = math.floor(k.fx * x / z + k.cx + 0.5)
        v = math.floor(k.fy * y / z + k.cy + 0.5)
        if not (0 <= u < w and 0 <= v < h):
            continue
        d = pred[v][u]
        if not (d == d and d > 0):
            continue
        total += abs(d - z) / z
        count += 1
    return (total / count if count else None), count


def test_06_mre_oracle(record):
    rng = np.random.default_rng(6)
    worst, mismatched = 0.0, 0
    for _ in range(100):
        w, h = rng.integers(4, 30, 2)
        k = Intrinsics(rng.uniform(5, 40), rng.uniform(5, 40), w / 2, h / 2, int(w), int(h))
        pred = rng.uniform(0.5, 60, (h, w))
        pred[rng.random((h, w)) < 0.3] = np.nan
        n = rng.integers(0, 60)
        pts = np.column_stack([rng.normal(0, 5, n), rng.normal(0, 3, n), rng.uniform(-2, 60, n)])
        cap = float(rng.choice(CAPS))
        got, m = mre(pred, pts, k, cap)
        ref, m_ref = brute_force_mre(pred.tolist(), pts.tolist(), k, cap)
        if m != m_ref or (got is None) != (ref is None):
            mismatched += 1
        elif got is not None:
            worst = max(worst, abs(got - ref) / ref if ref else abs(got))
    ok = mismatched == 0 and worst <= 1e-12
    assert record(6, "MRE oracle equivalence", ok, f"100 instances, count mismatches {mismatched}, worst rel diff {worst:.1e}")


def enumerate_assignments(iou, thr):
    n, m = iou.shape
    best, best_set = -1.0, None
    for r in range(min(n, m) + 1):
        for rows in itertools.combinations(range(n), r):
            for cols in itertools.permutations(range(m), r):
                pairs = list(zip(rows, cols))
                if all(iou[i, j] >= thr for i, j in pairs):
                    total = sum(iou[i, j] for i, j in pairs)
                    if total > best + 1e-12:
                        best, best_set = total, frozenset(pairs)
    return best, best_set


def test_07_tracker_optimality(record):
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(200):
        n, m = rng.integers(0, 7, 2)
        def boxes(c):
            xy = rng.uniform(0, 50, (c, 2))
            wh = rng.uniform(10, 40, (c, 2))
            return [Box2(x, y, x + a, y + b) for (x, y), (a, b) in zip(xy, wh)]
        tracks = [Track(i, b, 0) for i, b in enumerate(boxes(n))]
        dets = boxes(m)
        iou = np.array([[box_iou(t.last_box2, d) for d in dets] for t in tracks]).reshape(n, m)
        ids, _, _ = associate(tracks, dets, 1, iou_threshold=0.3)
        pairs = frozenset((i, j) for j, i in enumerate(ids) if i < n)
        total = sum(iou[i, j] for i, j in pairs)
        best, best_pairs = enumerate_assignments(iou, 0.3)
        accepted = {j for _, j in pairs}
        if abs(total - best) > 1e-9 or accepted != {j for _, j in best_pairs} or len(set(ids)) != len(ids):
            bad += 1
    assert record(7, "tracker optimality", bad == 0, f"200 instances, {bad} disagreements")


def random_scene(rng, k):
    bodies = []
    centers = []
    while len(bodies) < rng.integers(1, 4):
        dims = (rng.uniform(1.5, 4.5), rng.uniform(1.0, 2.0), rng.uniform(1.0, 2.0))
        c = np.array([rng.uniform(-6, 6), 1.6 - dims[2] / 2, rng.uniform(5, 25)])
        radius = 0.5 * np.linalg.norm(dims)
        if any(np.linalg.norm(c - c2) < radius + r2 + 0.1 for c2, r2 in centers):
            continue
        centers.append((c, radius))
        bodies.append(Body(dims, [Pose(yaw_rotation(rng.uniform(-np.pi, np.pi)), c)]))
    cam = Pose(rot_y(rng.uniform(-0.2, 0.2)), np.array([0.0, 0.0, rng.uniform(-1, 1)]))
    # bodies are placed in camera coordinates, then moved into the world
    bodies = [Body(b.dims, [compose(cam, b.trajectory[0])]) for b in bodies]
    return SceneScript(k, [cam], bodies, ((0.0, 1.0, 0.0), -1.6), None)


def test_08_decomposition_conservative(record):
    rng = np.random.default_rng(8)
    k = default_intrinsics()
    leaked, missed, frames, owned = 0, 0, 0, 0
    while frames < 100:
        f = render_frame(random_scene(rng, k), 0)
        if not f.packet.detections:
            continue
        frames += 1
        dets = f.packet.detections
        a = decompose(f.packet.depth, dets, k, Strategy.BOX2D)
        union = np.zeros(k.shape, dtype=bool)
        for _, d in dets:
            union |= d.box2.pixel_mask(k.shape)
        leaked += int(np.sum(np.isfinite(a.background) & union))
        # both the float32 packet depth and the float64 analytic depth
        for depth in (f.packet.depth, f.exact_depth):
            b = decompose(depth, dets, k, Strategy.BOX3D15)
            for tid, _ in dets:
                own = f.labels == tid
                owned += int(own.sum())
                missed += int(np.sum(own & ~np.isfinite(b.slice_for(tid))))
    ok = leaked == 0 and missed == 0
    assert record(8, "decomposition conservativeness", ok,
                  f"{frames} frames, {leaked} background pixels in boxes, {missed}/{owned} body pixels missed")


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return Pose(r, rng.uniform(-50, 50, 3))


def test_09_geometry_suite(record):
    rng = np.random.default_rng(9)
    n = 10_000
    group_bad = 0
    for _ in range(n):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        if not (
            compose(compose(a, b), c).allclose(compose(a, compose(b, c)))
            and compose(Pose.identity(), a).allclose(a)
            and compose(a, invert(a)).allclose(Pose.identity())
            and compose(invert(a), a).allclose(Pose.identity())
        ):
            group_bad += 1

    k = Intrinsics(721.5377, 721.5377, 609.5593, 172.854, 1242, 375)
    u = rng.integers(0, k.width, n)
    v = rng.integers(0, k.height, n)
    depth = np.full(k.shape, np.nan)
    depth[v, u] = rng.uniform(0.1, 100.0, n)
    pts, uv = backproject(depth, k)
    reproj = float(np.max(np.abs(project(pts, k) - uv)))

    flips = 0
    for _ in range(n):
        box = OrientedBox3(rng.uniform(-20, 20, 3), rng.uniform(0.2, 6, 3), rng.uniform(-np.pi, np.pi))
        p = box.center + rng.uniform(-4, 4, 3)
        motion = Pose(rot_y(rng.uniform(-np.pi, np.pi)), rng.uniform(-30, 30, 3))
        if contains(box, p) != contains(transform_box(box, motion), motion.apply(p)):
            flips += 1
    ok = group_bad == 0 and reproj < 1e-4 and flips == 0
    assert record(9, "geometry suite (10k samples each)", ok,
                  f"group-law failures {group_bad}, max reprojection {reproj:.1e} px, containment flips {flips}")


def test_10_format_round_trips(record, tmp_path):
    rng = np.random.default_rng(10)
    depth = rng.uniform(0.5, 80, (24, 32))
    depth[rng.random(depth.shape) < 0.2] = np.nan
    pose = Pose(rot_y(0.7), np.array([1.25, -3.0, 1e-9]))
    dets = [(2, Detection(Box2(3, 4, 20, 15), OrientedBox3([1, 1.2, 9], (4, 1.8, 1.5), -2.9), 0.75, "car")),
            (None, Detection(Box2(0, 0, 2, 2), None, 0.1, "van"))]
    pts = rng.normal(size=(100, 3)) * 20
    formats = {
        "depth": (io.write_depth, lambda p: io.read_depth(p)[0], depth, "d.dfdm"),
        "pose": (io.write_pose, io.read_pose, pose, "p.txt"),
        "detections": (io.write_detections, io.read_detections, dets, "j.json"),
        "lidar": (io.write_points, io.read_points, pts, "l.dfpt"),
    }
    identical = {}
    for name, (write, read, value, fname) in formats.items():
        a, b = tmp_path / ("a_" + fname), tmp_path / ("b_" + fname)
        write(a, value)
        write(b, read(a))
        identical[name] = a.read_bytes() == b.read_bytes()

    rejected = {}
    for name in ("depth", "lidar"):
        p = tmp_path / ("a_" + formats[name][3])
        raw = bytearray(p.read_bytes())
        raw[0:4] = b"BAD!"
        p.write_bytes(bytes(raw))
        try:
            formats[name][1](p)
            rejected[name] = False
        except io.FormatError as exc:
            rejected[name] = str(p) in str(exc) and "bad magic" in str(exc) and exc.offset == 0
    ok = all(identical.values()) and all(rejected.values())
    assert record(10, "format round-trips", ok, f"byte-identical {identical}, bad magic rejected {rejected}")


def test_11_throughput(record):
    script = default_scene()
    packets = [render_frame(script, t).packet for t in range(script.frames)]
    warm = DynamicMap(script.intrinsics)
    warm.process_frame(packets[0])
    dmap = DynamicMap(script.intrinsics)
    t0 = time.perf_counter()
    for p in packets:
        dmap.process_frame(p)
    fps = len(packets) / (time.perf_counter() - t0)
    ok = fps >= 10 and len(dmap.objects) == 2
    assert record(11, "throughput", ok, f"{fps:.1f} frames/s over {len(packets)} frames, {len(dmap.objects)} objects")
