import numpy as np
import pytest

from dynfusion.decomposition import Detection
from dynfusion.dynamic_map import (
    BACKGROUND_ID,
    NO_SURFACE,
    DynamicMap,
    FrameOrderError,
    FramePacket,
    MapConfig,
    Mode,
    ObjectInstance,
)
from dynfusion.geometry import Box2, OrientedBox3, Pose, compose, contains, enlarge, invert, rot_y, rot_z
from dynfusion.synthetic import default_scene, render_frame
from dynfusion.tsdf import TsdfVolume

from conftest import cuboid_scene


def run(script, mode="dynamic", frames=None, poses=None):
    dmap = DynamicMap(script.intrinsics, MapConfig(mode=mode))
    for t in range(frames or script.frames):
        p = render_frame(script, t).packet
        if poses is not None:
            p.camera_pose = poses[t]
        dmap.process_frame(p)
    return dmap


def crossings(values):
    """Number of + to - sign changes between consecutive valid samples."""
    ok = np.isfinite(values[:-1]) & np.isfinite(values[1:])
    return int(np.sum(ok & (values[:-1] > 0) & (values[1:] <= 0)))


def test_static_mode_fuses_everything(small_k, cuboid_frame):
    dmap = DynamicMap(small_k, MapConfig(mode="static"))
    rep = dmap.process_frame(cuboid_frame.packet)
    assert dmap.objects == {}
    assert rep.pixels_fused[BACKGROUND_ID] == np.isfinite(cuboid_frame.packet.depth).sum()


def test_new_tracklet_creates_one_object(small_k, cuboid_frame):
    dmap = DynamicMap(small_k)
    rep = dmap.process_frame(cuboid_frame.packet)
    assert list(dmap.objects) == [0]
    assert rep.blocks_allocated[0] > 0
    assert isinstance(dmap.objects[0], ObjectInstance)
    assert dmap.objects[0].volume.config.voxel_size == pytest.approx(0.0156)


def test_out_of_order_frame(small_k, cuboid_frame):
    dmap = DynamicMap(small_k)
    dmap.process_frame(cuboid_frame.packet)
    with pytest.raises(FrameOrderError):
        dmap.process_frame(cuboid_frame.packet)


def test_box_behind_camera_is_skipped(small_k):
    depth = np.full(small_k.shape, 5.0)
    det = Detection(Box2(0, 0, 20, 20), OrientedBox3([0, 0, -3], (1, 1, 1), 0.0))
    rep = DynamicMap(small_k).process_frame(FramePacket(0, depth, None, Pose.identity(), [(4, det)]))
    assert any("behind camera" in w for w in rep.warnings)
    assert 4 not in rep.pixels_fused


def test_missing_ids_are_tracked(small_k):
    script = cuboid_scene(small_k, frames=3, step=(0.05, 0, 0))
    dmap = DynamicMap(small_k)
    for t in range(3):
        p = render_frame(script, t).packet
        p.detections = [(None, d) for _, d in p.detections]
        rep = dmap.process_frame(p)
        assert rep.tracklet_ids == [0]
    assert list(dmap.objects) == [0] and len(dmap.objects[0].pose_history) == 3


@pytest.mark.parametrize(
    "cam, obj, expected",
    [
        (Pose.identity(), Pose.from_translation(0, 0, 5), [0, 0, 5]),
        (Pose.from_translation(1, 0, 0), Pose.from_translation(0, 1, 0), [1, 1, 0]),
        (Pose(rot_z(np.pi / 2), np.zeros(3)), Pose.from_translation(1, 0, 0), [0, 1, 0]),
    ],
)
def test_world_pose(small_k, cam, obj, expected):
    dmap = DynamicMap(small_k)
    dmap.trajectory[0] = cam
    dmap.objects[7] = ObjectInstance(7, TsdfVolume(), {0: obj})
    np.testing.assert_allclose(dmap.world_pose(7, 0).translation, expected, atol=1e-12)
    with pytest.raises(KeyError):
        dmap.world_pose(8, 0)
    with pytest.raises(KeyError):
        dmap.world_pose(7, 1)


def test_empty_map_renders_nothing(small_k):
    dmap = DynamicMap(small_k)
    dmap.trajectory[0] = Pose.identity()
    depth, ids = dmap.render_live_view(0)
    assert np.all(np.isnan(depth)) and np.all(ids == NO_SURFACE)
    assert dmap.export_state(0) == {}
    with pytest.raises(KeyError):
        dmap.render_live_view(1)


def test_object_occludes_background(small_k, cuboid_frame):
    dmap = DynamicMap(small_k)
    dmap.process_frame(cuboid_frame.packet)
    depth, ids = dmap.render_live_view(0)
    assert ids[40, 50] == 0 and abs(depth[40, 50] - 4.5) < 0.05
    assert ids[5, 5] == BACKGROUND_ID and abs(depth[5, 5] - 10.0) < 0.1


def test_cuboid_moving_towards_camera(small_k):
    # two frames, static camera, cube front face at 5.5 m then 4.5 m
    script = cuboid_scene(small_k, center=(0, 0, 6.0), frames=2, step=(0, 0, -1.0), plane_z=12.0)
    z = np.arange(3.5, 7.0, 0.005)
    ray = np.column_stack([np.zeros_like(z), np.zeros_like(z), z])

    static = run(script, "static")
    assert crossings(static.background.query_tsdf(ray)[0]) == 2

    dyn = run(script, "dynamic")
    assert crossings(dyn.background.query_tsdf(ray)[0]) == 0
    obj = dyn.objects[0]
    local = invert(obj.pose_history[1]).apply(ray)
    assert crossings(obj.volume.query_tsdf(local)[0]) == 1


def observed_inside(volume, boxes, margin):
    pts, _ = volume.observed_voxel_centers(0.5)
    hits = 0
    for box in boxes:
        shrunk = OrientedBox3(box.center, box.dims - 2 * margin, box.yaw)
        hits += int(contains(shrunk, pts).sum())
    return hits


def test_ghost_freedom():
    script = default_scene(frames=20)
    lead = script.bodies[0]
    world_boxes = [OrientedBox3(lead.trajectory[t].translation, lead.dims, np.pi / 2) for t in range(20)]
    margin = MapConfig().background.trunc_dist
    assert observed_inside(run(script, "dynamic").background, world_boxes, margin) == 0
    assert observed_inside(run(script, "static").background, world_boxes, margin) > 0


def test_object_volumes_ignore_camera_drift():
    script = default_scene(frames=6)
    drift = Pose(rot_y(0.2), np.array([3.0, -0.5, 7.0]))
    shifted = [compose(drift, p) for p in script.camera_trajectory]
    a, b = run(script), run(script, poses=shifted)
    assert sorted(a.objects) == sorted(b.objects) and a.objects
    for tid in a.objects:
        assert a.objects[tid].volume.checksum() == b.objects[tid].volume.checksum()
    assert a.background.checksum() != b.background.checksum()


def test_export_is_rigid_between_frames():
    script = default_scene(frames=5)
    dmap = run(script)
    s0, s4 = dmap.export_state(0), dmap.export_state(4)
    assert "background" in s0
    np.testing.assert_array_equal(s0["background"].vertices, s4["background"].vertices)
    rel = compose(dmap.world_pose(0, 4), invert(dmap.world_pose(0, 0)))
    assert not rel.allclose(Pose.identity())
    np.testing.assert_allclose(rel.apply(s0[0].vertices), s4[0].vertices, atol=1e-9)
    np.testing.assert_array_equal(s0[0].faces, s4[0].faces)


def test_background_mesh_lies_on_ground():
    script = default_scene(frames=8)
    dmap = run(script)
    verts = dmap.export_state(7)["background"].vertices
    # ground plane y = 1.6 except the far parked car, which gets blanked
    # out by its box and is not part of the background mesh
    rms = np.sqrt(np.mean((verts[:, 1] - 1.6) ** 2))
    assert rms < dmap.config.background.voxel_size


def test_live_view_matches_oracle():
    script = default_scene(frames=8)
    dmap = DynamicMap(script.intrinsics)
    for t in range(8):
        f = render_frame(script, t)
        dmap.process_frame(f.packet)
        depth, _ = dmap.render_live_view(t)
        ok = np.isfinite(depth) & np.isfinite(f.exact_depth)
        assert ok.sum() > 0.5 * np.isfinite(f.exact_depth).sum()
        assert np.median(np.abs(depth[ok] - f.exact_depth[ok])) < dmap.config.background.voxel_size


def test_static_scene_modes_agree():
    script = default_scene(frames=8, moving=False)
    a, b = run(script, "dynamic"), run(script, "static")
    for t in (3, 7):
        da, _ = a.render_live_view(t)
        db, _ = b.render_live_view(t)
        ok = np.isfinite(da) & np.isfinite(db)
        assert np.median(np.abs(da[ok] - db[ok])) < a.config.background.voxel_size


def test_small_slices_are_not_fused(small_k):
    script = cuboid_scene(small_k, center=(0, 0, 5.0), dims=(0.05, 0.05, 0.05))
    dmap = DynamicMap(small_k)
    rep = dmap.process_frame(render_frame(script, 0).packet)
    assert dmap.objects == {} and 0 not in rep.pixels_fused


def test_mode_aliases():
    assert Mode.parse("non-dynamic") is Mode.STATIC
    with pytest.raises(ValueError):
        Mode.parse("sometimes")


def test_volumes_are_disjoint(small_k, cuboid_frame):
    dmap = DynamicMap(small_k)
    dmap.process_frame(cuboid_frame.packet)
    arrays = [dmap.background.block_arrays()[1]] + [o.volume.block_arrays()[1] for o in dmap.objects.values()]
    for i in range(len(arrays)):
        for j in range(i + 1, len(arrays)):
            assert not np.shares_memory(arrays[i], arrays[j])
