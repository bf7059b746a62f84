"""On-disk layout for sensor logs.

A log directory holds one CSV per stream (timestamp column first), images
as lossless PNG with an index CSV, per-frame pseudo-depth as .npy, the
true keyframe trajectory in TUM format, and a YAML manifest recording
rates, noise, seed, camera intrinsics and the true landmark pose.
"""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from ..evaluate import export_tum, import_tum
from ..geometry import PinholeCamera, RigidPose
from .sensors import NoiseSpec, SensorLog, SensorRates, SimulationError

MANIFEST_NAME = "manifest.yaml"


def _write_csv(path: Path, header: list, rows: list):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_csv(path: Path, n_cols: int) -> list:
    rows = []
    with open(path) as f:
        header = f.readline()
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            vals = line.split(",")
            if len(vals) != n_cols:
                raise SimulationError(f"{path}: line {lineno}: expected {n_cols} columns")
            rows.append([float(v) for v in vals])
    return rows


def _pose_row(t: float, pose: RigidPose) -> list:
    tr, q = pose.translation, pose.quat
    return [t, tr[0], tr[1], tr[2], q[1], q[2], q[3], q[0]]


def _row_pose(row: list):
    t, tx, ty, tz, qx, qy, qz, qw = row
    return t, RigidPose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))


def save_log(out_dir, log: SensorLog, camera: PinholeCamera, noise: NoiseSpec,
             rates: SensorRates, seed_info: dict | None = None,
             true_poses: list | None = None, landmark_true: RigidPose | None = None,
             depth_provider=None):
    """Write a SensorLog (and optional ground truth) to a directory."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    image_rows = []
    for k, (t, img) in enumerate(log.images):
        name = f"frame_{k:06d}.png"
        arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(out / "images" / name)
        image_rows.append([t, k])
    _write_csv(out / "images.csv", ["timestamp", "frame_index"], image_rows)

    if depth_provider is not None:
        (out / "depth").mkdir(exist_ok=True)
        for k, (t, _) in enumerate(log.images):
            np.save(out / "depth" / f"frame_{k:06d}.npy", depth_provider(t))

    _write_csv(out / "gyro.csv", ["timestamp", "wx", "wy", "wz"],
               [[t, *w] for t, w in log.gyro])
    _write_csv(out / "accel.csv", ["timestamp", "ax", "ay", "az"],
               [[t, *a] for t, a in log.accel])
    _write_csv(out / "dvl.csv", ["timestamp", "vx", "vy", "vz"],
               [[t, *v] for t, v in log.dvl])
    _write_csv(out / "pressure.csv", ["timestamp", "depth"],
               [[t, d] for t, d in log.pressure_depth])
    _write_csv(out / "landmarks.csv",
               ["timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw"],
               [_pose_row(t, p) for t, p in log.landmark_obs])

    if true_poses is not None:
        export_tum(out / "groundtruth.tum", true_poses)

    manifest = {
        "camera": {"fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
                   "width": camera.width, "height": camera.height},
        "rates": dataclasses.asdict(rates),
        "noise": dataclasses.asdict(noise),
        "counts": {"images": len(log.images), "dvl": len(log.dvl),
                   "imu": len(log.gyro), "pressure": len(log.pressure_depth),
                   "landmark_obs": len(log.landmark_obs)},
    }
    if seed_info:
        manifest["generation"] = seed_info
    if landmark_true is not None:
        tr, q = landmark_true.translation, landmark_true.quat
        manifest["landmark_true"] = {
            "translation": [float(x) for x in tr],
            "quaternion_wxyz": [float(x) for x in q],
        }
    with open(out / MANIFEST_NAME, "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)


class LoadedLog:
    """A log directory pulled back into memory."""

    def __init__(self, log: SensorLog, camera: PinholeCamera, manifest: dict,
                 depth_paths: list, true_poses: list | None,
                 landmark_true: RigidPose | None):
        self.log = log
        self.camera = camera
        self.manifest = manifest
        self._depth_paths = depth_paths
        self.true_poses = true_poses
        self.landmark_true = landmark_true

    def depth_provider(self):
        if not self._depth_paths:
            return None
        by_time = {t: p for t, p in self._depth_paths}

        def provider(timestamp: float) -> np.ndarray:
            times = np.array(list(by_time.keys()))
            k = int(np.argmin(np.abs(times - timestamp)))
            if abs(times[k] - timestamp) > 1e-6:
                raise SimulationError(f"no depth for timestamp {timestamp}")
            return np.load(by_time[float(times[k])])

        return provider


def load_log(log_dir) -> LoadedLog:
    root = Path(log_dir)
    if not (root / MANIFEST_NAME).exists():
        raise SimulationError(f"{root}: missing {MANIFEST_NAME}")
    with open(root / MANIFEST_NAME) as f:
        manifest = yaml.safe_load(f)
    cam = manifest["camera"]
    camera = PinholeCamera(fx=cam["fx"], fy=cam["fy"], cx=cam["cx"], cy=cam["cy"],
                           width=int(cam["width"]), height=int(cam["height"]))

    images = []
    depth_paths = []
    for t, k in _read_csv(root / "images.csv", 2):
        name = f"frame_{int(k):06d}"
        img = np.asarray(Image.open(root / "images" / f"{name}.png"), dtype=float) / 255.0
        images.append((t, img))
        depth_file = root / "depth" / f"{name}.npy"
        if depth_file.exists():
            depth_paths.append((t, depth_file))

    gyro = [(r[0], np.array(r[1:4])) for r in _read_csv(root / "gyro.csv", 4)]
    accel = [(r[0], np.array(r[1:4])) for r in _read_csv(root / "accel.csv", 4)]
    dvl = [(r[0], np.array(r[1:4])) for r in _read_csv(root / "dvl.csv", 4)]
    pressure = [(r[0], r[1]) for r in _read_csv(root / "pressure.csv", 2)]
    landmark_obs = [_row_pose(r) for r in _read_csv(root / "landmarks.csv", 8)]

    log = SensorLog(images, dvl, gyro, accel, pressure, landmark_obs)
    log.validate()

    true_poses = None
    if (root / "groundtruth.tum").exists():
        true_poses = import_tum(root / "groundtruth.tum")
    landmark_true = None
    if "landmark_true" in manifest:
        lm = manifest["landmark_true"]
        landmark_true = RigidPose(np.array(lm["quaternion_wxyz"]), np.array(lm["translation"]))
    return LoadedLog(log, camera, manifest, depth_paths, true_poses, landmark_true)
