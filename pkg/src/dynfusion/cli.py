"""Command line: ``dynfusion {fuse,eval,synth,mesh}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .dynamic_map import DynamicMap, MapConfig, Mode
from .evaluation import WHOLE_IMAGE, WITHIN_BOXES, EvalConfig, evaluate_sequence, format_table
from .synthetic import NoiseSpec, default_scene, perturb, render_frame
from .tsdf import VolumeConfig

log = logging.getLogger("dynfusion")

# config-file key -> default
DEFAULTS = {
    "bg_voxel": 0.0468,
    "obj_voxel": 0.0156,
    "trunc_factor": 4.0,
    "max_depth": 40.0,
    "max_weight": 128.0,
    "block_side": 8,
    "min_object_pixels": 30,
    "iou_threshold": 0.3,
    "max_misses": 3,
    "enlarge_factor": 0.15,
    "use_hull": False,
    "mode": "dynamic",
    "strategy": "box2d",
}


def _settings(args) -> dict:
    s = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg = io.read_config(args.config)
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"{args.config}: unknown config keys {sorted(unknown)}")
        s.update(cfg)
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            s[key] = v
    return s


def map_config(s: dict) -> MapConfig:
    def vol(size):
        return VolumeConfig(
            voxel_size=float(size),
            trunc_dist=float(s["trunc_factor"]) * float(size),
            max_weight=float(s["max_weight"]),
            block_side=int(s["block_side"]),
            max_depth=float(s["max_depth"]),
        )

    return MapConfig(
        background=vol(s["bg_voxel"]),
        objects=vol(s["obj_voxel"]),
        strategy=s["strategy"],
        mode=s["mode"],
        min_object_pixels=int(s["min_object_pixels"]),
        use_hull=bool(s["use_hull"]),
        iou_threshold=float(s["iou_threshold"]),
        max_misses=int(s["max_misses"]),
        enlarge_factor=float(s["enlarge_factor"]),
    )


def cmd_fuse(args) -> int:
    s = _settings(args)
    manifest = io.read_manifest(args.manifest)
    out = io.ensure_dir(args.out)
    dmap = DynamicMap(manifest.intrinsics, map_config(s))
    stage = {"load": 0.0, "fuse": 0.0, "render": 0.0, "mesh": 0.0}
    frames = []
    t_start = time.perf_counter()
    for i in range(len(manifest)):
        t0 = time.perf_counter()
        packet = io.load_frame(manifest, i)
        t1 = time.perf_counter()
        report = dmap.process_frame(packet)
        t2 = time.perf_counter()
        depth, ids = dmap.render_live_view(packet.frame_index)
        io.write_depth(out / "renders" / f"depth_{i:06d}.dfdm", depth)
        np.save(out / "renders" / f"ids_{i:06d}.npy", ids.astype(np.int32))
        t3 = time.perf_counter()
        stage["load"] += t1 - t0
        stage["fuse"] += t2 - t1
        stage["render"] += t3 - t2
        frames.append(report.as_dict())
        log.info("frame %d fused in %.1f ms", i, 1e3 * (t2 - t1))

    t0 = time.perf_counter()
    io.write_mesh(dmap.background.extract_mesh(), out / "meshes" / "background.ply")
    for tid, mesh in dmap.object_meshes().items():
        io.write_mesh(mesh, out / "meshes" / f"object_{tid}.ply")
    stage["mesh"] = time.perf_counter() - t0

    io.write_json(out / "poses.json", {
        "trajectory": {str(f): io.pose_to_list(p) for f, p in sorted(dmap.trajectory.items())},
        "objects": {
            str(tid): {str(f): io.pose_to_list(p) for f, p in sorted(o.pose_history.items())}
            for tid, o in sorted(dmap.objects.items())
        },
    })
    io.write_json(out / "summary.json", {
        "manifest": str(Path(args.manifest).resolve()),
        "sequence": manifest.name,
        "mode": dmap.config.mode.value,
        "strategy": dmap.config.strategy.value,
        "settings": {k: (v.value if hasattr(v, "value") else v) for k, v in s.items()},
        "frames_processed": len(dmap.trajectory),
        "blocks": {
            "background": dmap.background.allocated_block_count,
            **{str(t): o.volume.allocated_block_count for t, o in sorted(dmap.objects.items())},
        },
        "wall_time_s": {**stage, "total": time.perf_counter() - t_start},
        "frames": frames,
    })
    print(f"fused {len(dmap.trajectory)} frames ({dmap.config.mode.value}) -> {out}")
    return 0


def _load_renders(recon: Path, n: int, k) -> dict:
    out = {}
    for i in range(n):
        p = recon / "renders" / f"depth_{i:06d}.dfdm"
        if p.exists():
            out[i], _ = io.read_depth(p, k.shape)
    return out


def cmd_eval(args) -> int:
    caps = tuple(float(c) for c in args.caps.split(","))
    config = EvalConfig(caps)
    manifest = io.read_manifest(args.manifest)
    packets = list(io.iter_frames(manifest))
    reports = {}
    payload = []
    for recon in args.recon_dirs:
        recon = Path(recon)
        summary = json.loads((recon / "summary.json").read_text()) if (recon / "summary.json").exists() else {}
        mode = summary.get("mode", recon.name)
        renders = _load_renders(recon, len(manifest), manifest.intrinsics)
        missing = [p.frame_index for p in packets if p.frame_index not in renders]
        if missing:
            raise io.MissingFileError(recon / "renders", f"no render for frames {missing[:5]}")
        rep = evaluate_sequence(renders, packets, manifest.intrinsics, config)
        reports[(manifest.name, mode)] = rep
        payload.append({"recon_dir": str(recon), "mode": mode, **rep.as_dict()})
    print(format_table(reports, caps, WHOLE_IMAGE, "Mean relative error, whole image (pooled over all counted points; (M) = points)"))
    print()
    print(format_table(reports, caps, WITHIN_BOXES, "Mean relative error, within 2D boxes (pooled over all counted points; (M) = points)"))
    if args.json:
        io.write_json(args.json, payload)
    return 0


def scene_from_config(cfg: dict):
    preset = cfg.get("preset", "default")
    if preset not in ("default", "static"):
        raise ValueError(f"unknown scene preset {preset!r}")
    return default_scene(
        frames=int(cfg.get("frames", 60)),
        width=int(cfg.get("width", 320)),
        height=int(cfg.get("height", 96)),
        moving=preset == "default",
        lateral_speed=float(cfg.get("lateral_speed", 0.1)),
        camera_speed=float(cfg.get("camera_speed", 0.1)),
    )


def cmd_synth(args) -> int:
    cfg = io.read_config(args.scene_config)
    script = scene_from_config(cfg)
    noise = NoiseSpec(
        seed=int(cfg.get("seed", 0)),
        depth_sigma=float(cfg.get("depth_sigma", 0.0)),
        center_sigma=float(cfg.get("center_sigma", 0.0)),
        yaw_sigma=float(cfg.get("yaw_sigma", 0.0)),
        drop_probability=float(cfg.get("drop_probability", 0.0)),
    )
    packets = [perturb(render_frame(script, t).packet, noise) for t in range(script.frames)]
    m = io.write_dataset(
        packets, script.intrinsics, args.out,
        input_kind=str(cfg.get("input_kind", "depth")),
        track_ids=bool(cfg.get("track_ids", True)),
        name=str(cfg.get("name", "")),
    )
    print(f"wrote {len(m)} frames -> {Path(args.out) / io.MANIFEST_NAME}")
    return 0


def cmd_mesh(args) -> int:
    recon = Path(args.recon_dir)
    poses = json.loads((recon / "poses.json").read_text())
    frame = str(args.frame)
    if frame not in poses["trajectory"]:
        raise KeyError(f"frame {args.frame} was not processed in {recon}")
    out = io.ensure_dir(args.out or recon / f"frame_{args.frame:06d}")
    bg = io.read_mesh(recon / "meshes" / "background.ply")
    io.write_mesh(bg, out / "background.ply")
    cam = io.pose_from_list(poses["trajectory"][frame])
    placed = 0
    for tid, hist in sorted(poses["objects"].items(), key=lambda kv: int(kv[0])):
        if frame not in hist:
            continue
        world = cam @ io.pose_from_list(hist[frame])
        mesh = io.read_mesh(recon / "meshes" / f"object_{tid}.ply")
        io.write_mesh(mesh.transformed(world), out / f"object_{tid}.ply")
        placed += 1
    print(f"frame {args.frame}: background + {placed} placed object meshes -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynfusion", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuse", help="reconstruct a dataset")
    f.add_argument("manifest")
    f.add_argument("--mode", choices=[m.value for m in Mode])
    f.add_argument("--strategy", choices=["box2d", "box3d15"])
    f.add_argument("--out", required=True)
    f.add_argument("--config", help="key=value settings file")
    f.add_argument("--bg-voxel", dest="bg_voxel", type=float)
    f.add_argument("--obj-voxel", dest="obj_voxel", type=float)
    f.add_argument("--trunc-factor", dest="trunc_factor", type=float)
    f.add_argument("--max-depth", dest="max_depth", type=float)
    f.add_argument("--max-weight", dest="max_weight", type=float)
    f.add_argument("--min-object-pixels", dest="min_object_pixels", type=int)
    f.add_argument("--iou-threshold", dest="iou_threshold", type=float)
    f.add_argument("--max-misses", dest="max_misses", type=int)
    f.add_argument("--hull", dest="use_hull", action="store_const", const=True)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="score renders against lidar ground truth")
    e.add_argument("manifest")
    e.add_argument("recon_dirs", nargs="+", metavar="recon-dir")
    e.add_argument("--caps", default="10,20,30,40")
    e.add_argument("--json", help="also write the report as JSON")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write an analytic oracle dataset")
    s.add_argument("scene_config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    m = sub.add_parser("mesh", help="export meshes placed at one frame")
    m.add_argument("recon_dir")
    m.add_argument("--frame", type=int, required=True)
    m.add_argument("--out")
    m.set_defaults(func=cmd_mesh)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (io.DatasetError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dynfusion {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
