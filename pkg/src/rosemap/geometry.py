"""SE(3)/SO(3) algebra on unit quaternions, plus the pinhole camera model.

Conventions used across the package:
  - World frame is z-up, units are meters/radians.
  - A pose maps body/camera coordinates into the world: x_w = R x_b + t.
  - Tangent vectors (twists) are ordered rotation-first: xi = [omega, rho].
  - All pose Jacobians are taken w.r.t. a left-multiplied perturbation,
    X <- exp(xi) * X, with xi expressed in the world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_QUAT_EPS = 1e-12
_SMALL_ANGLE = 1e-8


class GeometryError(Exception):
    """Base class for geometry failures."""


class BehindCameraError(GeometryError):
    """Point has non-positive depth along the optical axis."""


class LogMapBranchError(GeometryError):
    """Rotation angle is at pi; the principal log branch is ambiguous."""


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z ordering, Hamilton convention)
# ---------------------------------------------------------------------------

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(q))
    if n < _QUAT_EPS:
        raise GeometryError("cannot normalize near-zero quaternion")
    # skip the division when already unit so serialization round-trips
    # bit-stably; drift stays far below the 1e-9 norm invariant
    if abs(n - 1.0) > 1e-12:
        q = q / n
    # canonical sign: w >= 0 keeps log/compose deterministic
    if q[0] < 0.0:
        q = -q
    return q


def quat_from_rotvec(w: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(w))
    if angle < _SMALL_ANGLE:
        # sinc expansion, accurate to O(angle^4)
        half = 0.5 - angle * angle / 48.0
        return quat_normalize(np.array([1.0 - angle * angle / 8.0,
                                        half * w[0], half * w[1], half * w[2]]))
    axis = w / angle
    s = math.sin(0.5 * angle)
    return quat_normalize(np.array([math.cos(0.5 * angle),
                                    s * axis[0], s * axis[1], s * axis[2]]))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    vec_norm = float(np.linalg.norm(q[1:]))
    angle = 2.0 * math.atan2(vec_norm, q[0])
    if angle > math.pi - 1e-9:
        raise LogMapBranchError(f"rotation angle {angle:.12f} too close to pi")
    if vec_norm < _SMALL_ANGLE:
        return 2.0 * q[1:]  # small-angle: q ~ [1, w/2]
    return (angle / vec_norm) * q[1:]


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest diagonal combination for stability.
    t = np.trace(R)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    # q * [0, v] * q^-1 expanded to avoid building matrices
    u = q[1:]
    w = q[0]
    cross_uv = np.cross(u, v)
    return v + 2.0 * (w * cross_uv + np.cross(u, cross_uv))


# ---------------------------------------------------------------------------
# core value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Twist:
    """Tangent-space element: rotational part in radians, translational in meters."""

    rotational: np.ndarray
    translational: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotational", np.asarray(self.rotational, dtype=float).reshape(3).copy())
        object.__setattr__(self, "translational", np.asarray(self.translational, dtype=float).reshape(3).copy())
        if not (np.all(np.isfinite(self.rotational)) and np.all(np.isfinite(self.translational))):
            raise GeometryError("twist entries must be finite")

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotational, self.translational])


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform stored as a unit quaternion (w,x,y,z) and a translation."""

    quat: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.quat, dtype=float).reshape(4))
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "RigidPose":
        T = np.asarray(T, dtype=float)
        return RigidPose(quat_from_matrix(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_rt(R: np.ndarray, t: np.ndarray) -> "RigidPose":
        return RigidPose(quat_from_matrix(np.asarray(R, dtype=float)), t)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.translation
        return T

    def apply(self, point: np.ndarray) -> np.ndarray:
        """Map a body-frame point into the world frame."""
        return quat_rotate(self.quat, np.asarray(point, dtype=float)) + self.translation


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)


# ---------------------------------------------------------------------------
# group operations
# ---------------------------------------------------------------------------

def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """a then b in body order: result maps b's body frame through a."""
    q = quat_multiply(a.quat, b.quat)
    t = quat_rotate(a.quat, b.translation) + a.translation
    return RigidPose(q, t)


def inverse(p: RigidPose) -> RigidPose:
    qc = quat_conjugate(p.quat)
    return RigidPose(qc, -quat_rotate(qc, p.translation))


def so3_hat(w: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = so3_hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    t2 = theta * theta
    return (np.eye(3)
            + ((1.0 - math.cos(theta)) / t2) * W
            + ((theta - math.sin(theta)) / (t2 * theta)) * (W @ W))


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = so3_hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    half = 0.5 * theta
    cot_term = 1.0 / (theta * theta) - 0.5 * math.cos(half) / (theta * math.sin(half))
    return np.eye(3) - 0.5 * W + cot_term * (W @ W)


def se3_exp(xi: Twist) -> RigidPose:
    """Exponential map: Rodrigues rotation plus left-Jacobian translation."""
    q = quat_from_rotvec(xi.rotational)
    t = so3_left_jacobian(xi.rotational) @ xi.translational
    return RigidPose(q, t)


def se3_log(pose: RigidPose) -> Twist:
    """Principal-branch log map; raises LogMapBranchError at angle pi."""
    w = quat_to_rotvec(pose.quat)
    rho = so3_left_jacobian_inv(w) @ pose.translation
    return Twist(w, rho)


def se3_adjoint(pose: RigidPose) -> np.ndarray:
    """6x6 adjoint in (rot, trans) ordering: Ad = [[R, 0], [t^ R, R]]."""
    R = pose.rotation_matrix()
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = so3_hat(pose.translation) @ R
    return A


def _se3_q_matrix(rho: np.ndarray, w: np.ndarray) -> np.ndarray:
    # translation-rotation coupling block of the SE(3) left Jacobian
    theta = float(np.linalg.norm(w))
    P = so3_hat(rho)
    W = so3_hat(w)
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    if theta < 1e-4:
        c1 = 1.0 / 6.0 - theta * theta / 120.0
        c2 = 1.0 / 24.0 - theta * theta / 720.0
        c3 = 1.0 / 120.0 - theta * theta / 2520.0
    else:
        t2 = theta * theta
        t4 = t2 * t2
        sin_t = math.sin(theta)
        cos_t = math.cos(theta)
        c1 = (theta - sin_t) / (t2 * theta)
        c2 = (1.0 - 0.5 * t2 - cos_t) / t4
        c3 = 0.5 * (c2 - 3.0 * (theta - sin_t - t2 * theta / 6.0) / (t4 * theta))
    WW = W @ W
    return (0.5 * P
            + c1 * (WP + PW + W @ PW)
            - c2 * (WW @ P + P @ WW - 3.0 * WPW)
            - c3 * (WPW @ W + WW @ PW))


def se3_left_jacobian_inv(xi: Twist) -> np.ndarray:
    """Inverse left Jacobian of SE(3) in (rot, trans) block ordering."""
    Jinv = so3_left_jacobian_inv(xi.rotational)
    Q = _se3_q_matrix(xi.translational, xi.rotational)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ Q @ Jinv
    return out


def se3_right_jacobian_inv(xi: Twist) -> np.ndarray:
    """Inverse right Jacobian: d Log(exp(xi) exp(d))/dd at d=0."""
    return se3_left_jacobian_inv(Twist(-xi.rotational, -xi.translational))


# ---------------------------------------------------------------------------
# pinhole projection
# ---------------------------------------------------------------------------

def project(cam: PinholeCamera, point_cam: np.ndarray) -> tuple[np.ndarray, float]:
    """Project a camera-frame point; returns (pixel, depth) with depth = z."""
    p = np.asarray(point_cam, dtype=float).reshape(3)
    if p[2] <= 0.0:
        raise BehindCameraError(f"point depth {p[2]:.6g} is not positive")
    u = cam.fx * p[0] / p[2] + cam.cx
    v = cam.fy * p[1] / p[2] + cam.cy
    return np.array([u, v]), float(p[2])


def project_point_jacobian(cam: PinholeCamera, point_cam: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera-frame point), 2x3."""
    x, y, z = np.asarray(point_cam, dtype=float).reshape(3)
    if z <= 0.0:
        raise BehindCameraError("cannot linearize behind the camera")
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def camera_point_pose_jacobian(pose: RigidPose, point_world: np.ndarray) -> np.ndarray:
    """d(camera-frame point)/d(xi) for X <- exp(xi) X, 3x6 in (rot, trans) order."""
    R = pose.rotation_matrix()
    mu = np.asarray(point_world, dtype=float).reshape(3)
    J = np.zeros((3, 6))
    J[:, :3] = R.T @ so3_hat(mu)
    J[:, 3:] = -R.T
    return J


def project_world_point(cam: PinholeCamera, pose: RigidPose,
                        point_world: np.ndarray) -> tuple[np.ndarray, float]:
    """Project a world point through a camera at `pose` (world-from-camera)."""
    p_cam = inverse(pose).apply(point_world)
    return project(cam, p_cam)
