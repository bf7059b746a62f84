"""Command-line surface: simulate, run, eval, export-ply, render."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger("rosemap.cli")


def _cmd_simulate(args) -> int:
    from .geometry import PinholeCamera
    from .sim.config import SimConfig
    from .sim.logio import save_log
    from .sim.rosette import RosetteSpec, generate_rosette, landmark_pose
    from .sim.scene import generate_ground_truth_scene
    from .sim.sensors import Simulator

    cfg = SimConfig.from_yaml(args.config) if args.config else SimConfig()
    scene = generate_ground_truth_scene(cfg.scene.extent, cfg.scene.splat_count,
                                        cfg.scene.seed, relief=cfg.scene.relief)
    spec = RosetteSpec(cfg.rosette.petal_count, cfg.rosette.radius,
                       cfg.rosette.altitude, cfg.rosette.speed,
                       np.asarray(cfg.rosette.center, dtype=float))
    traj = generate_rosette(spec, cfg.trajectory_dt)
    cam = PinholeCamera(fx=cfg.camera.focal, fy=cfg.camera.focal,
                        cx=cfg.camera.width / 2.0, cy=cfg.camera.height / 2.0,
                        width=cfg.camera.width, height=cfg.camera.height)
    sim = Simulator(scene, cam, traj, landmark_pose(spec), cfg.noise, cfg.rates)
    log.info("synthesizing sensors over %.1f s of trajectory", traj[-1][0])
    sensor_log = sim.run()
    save_log(args.out, sensor_log, cam, cfg.noise, cfg.rates,
             seed_info={"scene_seed": cfg.scene.seed, "noise_seed": cfg.noise.rng_seed},
             true_poses=sim.true_keyframe_poses(),
             landmark_true=landmark_pose(spec),
             depth_provider=sim.pseudo_depth)
    print(f"wrote {len(sensor_log.images)} frames to {args.out}")
    return 0


def _cmd_run(args) -> int:
    from .mapper import PipelineConfig, run_pipeline
    from .sim.logio import load_log

    cfg = PipelineConfig.from_yaml(args.config) if args.config else PipelineConfig()
    loaded = load_log(args.log)
    provider = loaded.depth_provider()
    if provider is None:
        print("error: log directory has no pseudo-depth images", file=sys.stderr)
        return 2
    result = run_pipeline(loaded.log, loaded.camera, provider, cfg,
                          true_poses=loaded.true_poses)
    result.write_outputs(args.out)
    rep = result.report
    ate = "n/a" if rep.ate_rmse is None else f"{rep.ate_rmse:.4f} m"
    print(f"frames={len(result.trajectory)} splats={len(result.splats)} "
          f"ate={ate} psnr={rep.mean_psnr:.2f} dB ssim={rep.mean_ssim:.4f} "
          f"runtime={result.runtime_s:.0f} s")
    return 0


def _cmd_eval(args) -> int:
    from .evaluate import ate_rmse, import_tum, match_and_align, trajectory_length

    est = import_tum(args.est)
    ref = import_tum(args.ref)
    pair = match_and_align(est, ref, with_scale=args.scale,
                           match_tolerance=args.match_tolerance)
    ate = ate_rmse(pair)
    rows = [
        ("ate_rmse_m", repr(ate)),
        ("matched_pairs", str(pair.est_points.shape[0])),
        ("est_length_m", repr(trajectory_length(est))),
        ("ref_length_m", repr(trajectory_length(ref))),
        ("alignment", "sim3" if args.scale else "se3"),
        ("scale", repr(pair.scale)),
    ]
    if args.out:
        with open(args.out, "w") as f:
            f.write("metric,value\n")
            for k, v in rows:
                f.write(f"{k},{v}\n")
    for k, v in rows:
        print(f"{k}: {v}")
    return 0


def _cmd_export_ply(args) -> int:
    from .splat.gaussians import SplatMap

    splats = SplatMap.load_npz(args.map)
    splats.save_ply(args.out)
    print(f"wrote {len(splats)} splats to {args.out}")
    return 0


def _parse_pose(text: str):
    from .geometry import RigidPose

    vals = [float(x) for x in text.replace(",", " ").split()]
    if len(vals) != 7:
        raise ValueError("pose needs 7 values: tx ty tz qx qy qz qw")
    tx, ty, tz, qx, qy, qz, qw = vals
    return RigidPose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))


def _cmd_render(args) -> int:
    from .evaluate import import_tum
    from .geometry import PinholeCamera
    from .splat.gaussians import SplatMap
    from .splat.render import rasterize

    path = Path(args.map)
    splats = SplatMap.load_ply(path) if path.suffix == ".ply" else SplatMap.load_npz(path)
    cam = PinholeCamera(fx=args.focal, fy=args.focal, cx=args.width / 2.0,
                        cy=args.height / 2.0, width=args.width, height=args.height)
    if args.pose:
        poses = [(0.0, _parse_pose(args.pose))]
    elif args.traj:
        poses = import_tum(args.traj)
    else:
        print("error: pass --pose or --traj", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, (t, pose) in enumerate(poses):
        res = rasterize(splats, cam, pose)
        arr = np.clip(np.round(res.color * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(out / f"render_{k:06d}.png")
    print(f"rendered {len(poses)} view(s) into {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rosemap",
        description="Incremental splat mapping and multimodal pose-graph SLAM "
                    "for landmark-centered surveys.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic survey log")
    p.add_argument("--config", help="simulator YAML config (defaults otherwise)")
    p.add_argument("--out", required=True, help="output log directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("run", help="run the mapping pipeline on a log directory")
    p.add_argument("--log", required=True)
    p.add_argument("--config", help="pipeline YAML config (defaults otherwise)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="trajectory ATE between two TUM files")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--scale", action="store_true", help="similarity (Sim3) alignment")
    p.add_argument("--match-tolerance", type=float, default=0.02)
    p.add_argument("--out", help="write metrics CSV here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-ply", help="convert a saved map (.npz) to PLY")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_ply)

    p = sub.add_parser("render", help="render a saved map from given poses")
    p.add_argument("--map", required=True, help=".npz or .ply map file")
    p.add_argument("--pose", help="tx ty tz qx qy qz qw")
    p.add_argument("--traj", help="TUM trajectory file")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--focal", type=float, default=110.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # surface a clean diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
