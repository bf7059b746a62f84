"""Multimodal sensor synthesis from a ground-truth trajectory and scene.

Streams are sampled at per-sensor rates with additive bias and white noise
drawn from one seeded generator in a fixed order, so an identical
(trajectory, noise, rates) triple reproduces the log bit for bit. Images
are rendered from the ground-truth splat scene at the true poses; landmark
observations are full relative poses emitted whenever the landmark
projects inside the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import (
    BehindCameraError,
    PinholeCamera,
    RigidPose,
    Twist,
    compose,
    inverse,
    project,
    se3_exp,
)
from ..splat.render import rasterize
from .rosette import ContinuousTrajectory

GRAVITY = 9.81


class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    gyro_sigma: float = 0.0            # rad/s white noise
    gyro_bias: tuple = (0.0, 0.0, 0.0)  # rad/s constant
    accel_sigma: float = 0.0           # m/s^2 white noise
    accel_bias: tuple = (0.0, 0.0, 0.0)
    dvl_sigma: float = 0.0             # m/s
    depth_sigma: float = 0.0           # m
    landmark_rot_sigma: float = 0.0    # rad
    landmark_trans_sigma: float = 0.0  # m
    depthmap_sigma: float = 0.0        # relative (fraction of true depth)
    depthmap_scale_bias: float = 0.0   # relative global bias
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("gyro_sigma", "accel_sigma", "dvl_sigma", "depth_sigma",
                     "landmark_rot_sigma", "landmark_trans_sigma", "depthmap_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        object.__setattr__(self, "gyro_bias", tuple(float(x) for x in np.reshape(self.gyro_bias, 3)))
        object.__setattr__(self, "accel_bias", tuple(float(x) for x in np.reshape(self.accel_bias, 3)))


@dataclass(frozen=True)
class SensorRates:
    camera: float = 3.0
    dvl: float = 5.0
    imu: float = 100.0
    pressure: float = 22.0


@dataclass
class SensorLog:
    images: list               # (t, HxWx3 float image in [0,1])
    dvl: list                  # (t, 3-vector m/s, body frame)
    gyro: list                 # (t, 3-vector rad/s, body frame)
    accel: list                # (t, 3-vector m/s^2 specific force, body frame)
    pressure_depth: list       # (t, scalar m)
    landmark_obs: list         # (t, RigidPose measured relative landmark pose)

    def validate(self):
        for name in ("images", "dvl", "gyro", "accel", "pressure_depth", "landmark_obs"):
            ts = [t for t, _ in getattr(self, name)]
            if any(b <= a for a, b in zip(ts[:-1], ts[1:])):
                raise SimulationError(f"{name} timestamps must be strictly increasing")


def _sample_times(t0: float, t1: float, rate: float) -> np.ndarray:
    n = int(math.floor((t1 - t0) * rate + 1e-9)) + 1
    return t0 + np.arange(n) / rate


def default_camera(width: int = 128, height: int = 96) -> PinholeCamera:
    # about 60 x 47 degrees; at 2 m altitude one frame spans ~2.3 x 1.7 m
    focal = 110.0 * width / 128.0
    return PinholeCamera(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                         width=width, height=height)


def landmark_visible(camera: PinholeCamera, pose: RigidPose, landmark: RigidPose) -> bool:
    try:
        pix, depth = project(camera, inverse(pose).apply(landmark.translation))
    except BehindCameraError:
        return False
    return bool(0 <= pix[0] < camera.width and 0 <= pix[1] < camera.height and depth > 0)


def _perturb_pose(pose: RigidPose, rot_sigma: float, trans_sigma: float,
                  rng: np.random.Generator) -> RigidPose:
    xi = Twist(rng.normal(0.0, rot_sigma, 3) if rot_sigma > 0 else np.zeros(3),
               rng.normal(0.0, trans_sigma, 3) if trans_sigma > 0 else np.zeros(3))
    return compose(pose, se3_exp(xi))


def synthesize_sensors(traj: list, noise: NoiseSpec, rates: SensorRates,
                       scene=None, camera: PinholeCamera | None = None,
                       landmark: RigidPose | None = None) -> SensorLog:
    """Sample all sensor streams over the span of a ground-truth trajectory.

    `traj` is a list of (timestamp, RigidPose) samples dense enough to
    spline. Images are only produced when a scene and camera are given;
    landmark observations additionally need the landmark pose.
    """
    if not traj:
        raise SimulationError("empty trajectory")
    ct = ContinuousTrajectory(traj)
    rng = np.random.default_rng(noise.rng_seed)
    t0, t1 = ct.t0, ct.t1

    imu_t = _sample_times(t0, t1, rates.imu)
    gyro = []
    accel = []
    for t in imu_t:
        w = ct.gyro_body(t) + np.asarray(noise.gyro_bias)
        if noise.gyro_sigma > 0:
            w = w + rng.normal(0, noise.gyro_sigma, 3)
        gyro.append((float(t), w))
    for t in imu_t:
        a = ct.specific_force_body(t, GRAVITY) + np.asarray(noise.accel_bias)
        if noise.accel_sigma > 0:
            a = a + rng.normal(0, noise.accel_sigma, 3)
        accel.append((float(t), a))

    dvl = []
    for t in _sample_times(t0, t1, rates.dvl):
        Rwb = ct.pose(t).rotation_matrix()
        v = Rwb.T @ ct.velocity_world(t)
        if noise.dvl_sigma > 0:
            v = v + rng.normal(0, noise.dvl_sigma, 3)
        dvl.append((float(t), v))

    pressure = []
    for t in _sample_times(t0, t1, rates.pressure):
        d = -ct.pose(t).translation[2]
        if noise.depth_sigma > 0:
            d = d + rng.normal(0, noise.depth_sigma)
        pressure.append((float(t), float(d)))

    images = []
    landmark_obs = []
    for t in _sample_times(t0, t1, rates.camera):
        pose = ct.pose(t)
        if scene is not None and camera is not None:
            out = rasterize(scene, camera, pose)
            images.append((float(t), out.color))
        if landmark is not None and camera is not None and landmark_visible(camera, pose, landmark):
            rel = compose(inverse(pose), landmark)
            rel = _perturb_pose(rel, noise.landmark_rot_sigma, noise.landmark_trans_sigma, rng)
            landmark_obs.append((float(t), rel))

    log = SensorLog(images, dvl, gyro, accel, pressure, landmark_obs)
    log.validate()
    return log


class Simulator:
    """Owns the ground-truth world and produces logs plus pseudo-depth.

    Pseudo-depth mimics a metric monocular depth model: the rendered
    ground-truth depth at the true pose with per-pixel relative noise and
    an optional global scale bias. Each frame's noise is seeded by the
    frame index, so lazily evaluated depth stays deterministic.
    """

    def __init__(self, scene, camera: PinholeCamera, traj: list,
                 landmark: RigidPose | None, noise: NoiseSpec, rates: SensorRates):
        self.scene = scene
        self.camera = camera
        self.trajectory = ContinuousTrajectory(traj)
        self._traj_samples = traj
        self.landmark = landmark
        self.noise = noise
        self.rates = rates
        self._image_times = _sample_times(self.trajectory.t0, self.trajectory.t1, rates.camera)

    def run(self) -> SensorLog:
        return synthesize_sensors(self._traj_samples, self.noise, self.rates,
                                  scene=self.scene, camera=self.camera,
                                  landmark=self.landmark)

    def true_keyframe_poses(self) -> list:
        return [(float(t), self.trajectory.pose(t)) for t in self._image_times]

    def frame_index_of(self, timestamp: float) -> int:
        diffs = np.abs(self._image_times - timestamp)
        k = int(np.argmin(diffs))
        if diffs[k] > 1e-6:
            raise SimulationError(f"no image at timestamp {timestamp}")
        return k

    def render_true_depth(self, timestamp: float) -> np.ndarray:
        pose = self.trajectory.pose(self._image_times[self.frame_index_of(timestamp)])
        return rasterize(self.scene, self.camera, pose).depth

    def pseudo_depth(self, timestamp: float) -> np.ndarray:
        """Noisy metric depth for the frame at `timestamp`."""
        k = self.frame_index_of(timestamp)
        depth = self.render_true_depth(timestamp)
        scale = 1.0 + self.noise.depthmap_scale_bias
        if self.noise.depthmap_sigma > 0:
            rng = np.random.default_rng([self.noise.rng_seed, 7777, k])
            eps = rng.normal(0.0, self.noise.depthmap_sigma, depth.shape)
            return depth * scale * (1.0 + eps)
        return depth * scale
