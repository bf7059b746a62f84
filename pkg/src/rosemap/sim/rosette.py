"""Rosette survey trajectory generation.

The path is the rose curve p(theta) = R sin(P theta / 2) (cos theta,
sin theta) at constant altitude, traversed at constant speed. Its distance
from the center is R |sin(P theta / 2)|, giving P petals that all pass
through the central landmark; the signed radial form keeps the crossing
through the center smooth, so velocity and acceleration stay bounded.
The camera points straight down and the heading follows the path tangent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from ..geometry import RigidPose, quat_from_matrix

# camera axes at yaw zero: x right, y back, z down (right-handed, det +1)
R_DOWN = np.diag([1.0, -1.0, -1.0])


def yaw_down_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Rz @ R_DOWN


@dataclass(frozen=True)
class RosetteSpec:
    petal_count: int
    radius: float
    altitude: float
    speed: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3).copy())
        if self.petal_count < 1:
            raise ValueError("petal_count must be at least 1")
        if self.radius <= 0 or self.speed <= 0:
            raise ValueError("radius and speed must be positive")


def _rose_xy(spec: RosetteSpec, theta: np.ndarray):
    r = spec.radius * np.sin(spec.petal_count * theta / 2.0)
    return r * np.cos(theta), r * np.sin(theta)


def _rose_tangent(spec: RosetteSpec, theta: np.ndarray):
    half = spec.petal_count / 2.0
    r = spec.radius * np.sin(half * theta)
    dr = spec.radius * half * np.cos(half * theta)
    dx = dr * np.cos(theta) - r * np.sin(theta)
    dy = dr * np.sin(theta) + r * np.cos(theta)
    return dx, dy


def rosette_path_length(spec: RosetteSpec, n: int = 200_001) -> float:
    theta = np.linspace(0.0, 2 * math.pi, n)
    dx, dy = _rose_tangent(spec, theta)
    return float(np.trapezoid(np.hypot(dx, dy), theta))


def generate_rosette(spec: RosetteSpec, dt: float) -> list:
    """Constant-speed samples (timestamp, RigidPose) along the full rosette."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_dense = 200_001
    theta = np.linspace(0.0, 2 * math.pi, n_dense)
    dx, dy = _rose_tangent(spec, theta)
    ds = np.hypot(dx, dy)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (ds[1:] + ds[:-1]) * np.diff(theta))])
    total = s[-1]
    duration = total / spec.speed
    times = np.arange(0.0, duration + 1e-12, dt)
    times = times[times * spec.speed <= total]
    theta_of_s = CubicSpline(s, theta)
    th = theta_of_s(times * spec.speed)

    x, y = _rose_xy(spec, th)
    tx, ty = _rose_tangent(spec, th)
    yaw = np.unwrap(np.arctan2(ty, tx))

    out = []
    for k, t in enumerate(times):
        Rwb = yaw_down_rotation(yaw[k])
        pos = spec.center + np.array([x[k], y[k], spec.altitude])
        out.append((float(t), RigidPose(quat_from_matrix(Rwb), pos)))
    return out


def landmark_pose(spec: RosetteSpec) -> RigidPose:
    """The central landmark: flat on the seafloor at the rosette center."""
    return RigidPose(np.array([1.0, 0, 0, 0]), spec.center)


class ContinuousTrajectory:
    """Spline interpolation of a yaw-plus-nadir pose sequence.

    Positions get a cubic spline per axis; orientation is reduced to the
    yaw angle of R * R_DOWN^T (the trajectory generator only emits poses of
    that form). Derivatives come from the spline coefficients, so velocity,
    acceleration and yaw rate are analytic in the interpolant.
    """

    def __init__(self, samples: list):
        if len(samples) < 4:
            raise ValueError("need at least 4 samples to build the trajectory spline")
        times = np.array([t for t, _ in samples], dtype=float)
        if np.any(np.diff(times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        pos = np.stack([p.translation for _, p in samples])
        yaws = []
        for _, p in samples:
            Rz = p.rotation_matrix() @ R_DOWN.T
            if abs(Rz[2, 2] - 1.0) > 1e-6 or np.abs(Rz[2, :2]).max() > 1e-6:
                raise ValueError("trajectory poses must be yaw rotations of the nadir camera")
            yaws.append(math.atan2(Rz[1, 0], Rz[0, 0]))
        yaw = np.unwrap(np.array(yaws))
        self.t0 = float(times[0])
        self.t1 = float(times[-1])
        self._pos = CubicSpline(times, pos, axis=0)
        self._vel = self._pos.derivative()
        self._acc = self._vel.derivative()
        self._yaw = CubicSpline(times, yaw)
        self._yaw_rate = self._yaw.derivative()

    def _check(self, t):
        if t < self.t0 - 1e-9 or t > self.t1 + 1e-9:
            raise ValueError(f"time {t} outside trajectory [{self.t0}, {self.t1}]")

    def pose(self, t: float) -> RigidPose:
        self._check(t)
        Rwb = yaw_down_rotation(float(self._yaw(t)))
        return RigidPose(quat_from_matrix(Rwb), self._pos(t))

    def velocity_world(self, t: float) -> np.ndarray:
        self._check(t)
        return np.asarray(self._vel(t), dtype=float)

    def acceleration_world(self, t: float) -> np.ndarray:
        self._check(t)
        return np.asarray(self._acc(t), dtype=float)

    def gyro_body(self, t: float) -> np.ndarray:
        self._check(t)
        Rwb = yaw_down_rotation(float(self._yaw(t)))
        return Rwb.T @ np.array([0.0, 0.0, float(self._yaw_rate(t))])

    def specific_force_body(self, t: float, gravity: float = 9.81) -> np.ndarray:
        self._check(t)
        Rwb = yaw_down_rotation(float(self._yaw(t)))
        g_world = np.array([0.0, 0.0, -gravity])
        return Rwb.T @ (self.acceleration_world(t) - g_world)
