"""Attitude complementary filter and the odometry EKF.

The complementary filter owns the attitude: gyro integration plus a small
tilt correction toward the measured specific-force direction. The EKF keeps
a 9-dimensional covariance over (position, orientation, velocity) but its
orientation mean is simply replaced by the filter attitude at every
prediction, so position and velocity are the only states measurements
actually move. Both run sequentially over a sensor log at sensor-specific
timestamps and snapshot odometry at camera times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    RigidPose,
    Twist,
    compose,
    inverse,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    se3_log,
)

GRAVITY = 9.81
CHI2_GATE_3DOF = 16.266   # chi-square 0.999 quantile, 3 dof
CHI2_GATE_1DOF = 10.828   # chi-square 0.999 quantile, 1 dof
FREEFALL_ACCEL_FLOOR = 0.5  # m/s^2; below this the tilt cue is meaningless


class FilterError(Exception):
    pass


@dataclass(frozen=True)
class OrientationState:
    attitude: np.ndarray                  # unit quaternion, w x y z
    gyro_bias_estimate: np.ndarray        # rad/s

    def __post_init__(self):
        object.__setattr__(self, "attitude", quat_normalize(np.asarray(self.attitude, dtype=float)))
        object.__setattr__(self, "gyro_bias_estimate",
                           np.asarray(self.gyro_bias_estimate, dtype=float).reshape(3).copy())

    @staticmethod
    def from_pose(pose: RigidPose) -> "OrientationState":
        return OrientationState(pose.quat, np.zeros(3))


@dataclass
class OdomState:
    pose: RigidPose
    velocity: np.ndarray                  # world frame, m/s
    covariance: np.ndarray                # 9x9 over (position, orientation, velocity)

    def copy(self) -> "OdomState":
        return OdomState(self.pose, self.velocity.copy(), self.covariance.copy())


def complementary_update(state: OrientationState, omega: np.ndarray, accel: np.ndarray,
                         dt: float, gain: float = 0.01,
                         bias_gain: float = 0.0) -> OrientationState:
    """Integrate gyro then nudge roll/pitch toward the gravity direction.

    `accel` is the specific-force reading (world-up in body coordinates when
    at rest). Pass acceleration-compensated values for moving platforms.
    """
    if dt <= 0:
        raise FilterError("dt must be positive")
    omega = np.asarray(omega, dtype=float) - state.gyro_bias_estimate
    q = quat_multiply(state.attitude, quat_from_rotvec(omega * dt))
    q = quat_normalize(q)
    bias = state.gyro_bias_estimate
    accel = np.asarray(accel, dtype=float)
    a_norm = float(np.linalg.norm(accel))
    if a_norm > FREEFALL_ACCEL_FLOOR:
        up_meas = accel / a_norm
        qc = np.array([q[0], -q[1], -q[2], -q[3]])
        up_pred = quat_rotate(qc, np.array([0.0, 0.0, 1.0]))
        err = np.cross(up_pred, up_meas)
        q = quat_normalize(quat_multiply(q, quat_from_rotvec(-gain * err)))
        if bias_gain > 0.0:
            bias = bias + bias_gain * err * dt
    return OrientationState(q, bias)


@dataclass
class EkfParams:
    q_pos: float = 1e-6        # m^2/s
    q_rot: float = 2.5e-5      # rad^2/s (gyro noise density squared)
    q_vel: float = 0.5         # (m/s)^2/s, keeps DVL gain near one
    dvl_sigma: float = 0.02    # m/s
    depth_sigma: float = 0.05  # m
    comp_gain: float = 0.01
    comp_bias_gain: float = 0.0
    odom_rot_rate: float = 2.5e-5   # rad^2/s accumulated into delta covariances
    odom_trans_rate: float = 4e-4   # m^2/s


def initial_odom_state(pose: RigidPose, velocity=None, position_var=1e-6,
                       rot_var=1e-6, vel_var=1e-4) -> OdomState:
    cov = np.diag([position_var] * 3 + [rot_var] * 3 + [vel_var] * 3).astype(float)
    vel = np.zeros(3) if velocity is None else np.asarray(velocity, dtype=float)
    return OdomState(pose, vel, cov)


def ekf_predict(state: OdomState, attitude: np.ndarray, dt: float,
                params: EkfParams | None = None,
                accel_body: np.ndarray | None = None) -> OdomState:
    """Prediction step; orientation is adopted from the filter attitude.

    Without `accel_body` this is the constant-velocity form
    (position += velocity * dt). With it, the specific-force reading
    propagates velocity through gravity compensation, which removes the
    zero-order-hold drift between velocity fixes.
    """
    if dt <= 0:
        raise FilterError("dt must be positive")
    params = params or EkfParams()
    vel = state.velocity.copy()
    pos = state.pose.translation + vel * dt
    if accel_body is not None:
        Rwb = quat_to_matrix(quat_normalize(np.asarray(attitude, dtype=float)))
        a_world = Rwb @ np.asarray(accel_body, dtype=float) + np.array([0.0, 0.0, -GRAVITY])
        pos = pos + 0.5 * a_world * dt * dt
        vel = vel + a_world * dt
    F = np.eye(9)
    F[0:3, 6:9] = dt * np.eye(3)
    Q = np.diag([params.q_pos] * 3 + [params.q_rot] * 3 + [params.q_vel] * 3) * dt
    cov = F @ state.covariance @ F.T + Q
    cov = 0.5 * (cov + cov.T)
    return OdomState(RigidPose(attitude, pos), vel, cov)


def _apply_update(state: OdomState, K: np.ndarray, innovation: np.ndarray,
                  H: np.ndarray, R: np.ndarray) -> OdomState:
    dx = K @ innovation
    pos = state.pose.translation + dx[0:3]
    quat = quat_normalize(quat_multiply(quat_from_rotvec(dx[3:6]), state.pose.quat))
    vel = state.velocity + dx[6:9]
    IKH = np.eye(9) - K @ H
    cov = IKH @ state.covariance @ IKH.T + K @ R @ K.T   # Joseph form
    cov = 0.5 * (cov + cov.T)
    return OdomState(RigidPose(quat, pos), vel, cov)


def ekf_update_dvl(state: OdomState, v_body: np.ndarray, R_dvl: np.ndarray) -> OdomState:
    """Body-frame velocity update with a chi-square outlier gate."""
    v_body = np.asarray(v_body, dtype=float).reshape(3)
    if not np.all(np.isfinite(v_body)):
        raise FilterError("non-finite DVL measurement")
    R_dvl = np.asarray(R_dvl, dtype=float).reshape(3, 3)
    Rwb = quat_to_matrix(state.pose.quat)
    H = np.zeros((3, 9))
    H[:, 6:9] = Rwb.T
    predicted = Rwb.T @ state.velocity
    y = v_body - predicted
    S = H @ state.covariance @ H.T + R_dvl
    try:
        S_inv = np.linalg.inv(S)
    except np.linalg.LinAlgError as e:
        raise FilterError("singular innovation covariance") from e
    if float(y @ S_inv @ y) > CHI2_GATE_3DOF:
        return state
    K = state.covariance @ H.T @ S_inv
    return _apply_update(state, K, y, H, R_dvl)


def ekf_update_depth(state: OdomState, d: float, r: float) -> OdomState:
    """Scalar update on world z with z = -depth."""
    if not math.isfinite(d):
        raise FilterError("non-finite depth measurement")
    if r <= 0:
        raise FilterError("depth variance must be positive")
    H = np.zeros((1, 9))
    H[0, 2] = 1.0
    y = np.array([-d - state.pose.translation[2]])
    S = float(state.covariance[2, 2] + r)
    if y[0] * y[0] / S > CHI2_GATE_1DOF:
        return state
    K = state.covariance @ H.T / S
    return _apply_update(state, K, y, H, np.array([[r]]))


def extract_odometry_deltas(keyframes: list, params: EkfParams | None = None) -> list:
    """Relative poses between consecutive keyframe states.

    `keyframes` holds (timestamp, OdomState) pairs in time order. Delta
    covariances accumulate the configured odometry noise rates over the
    interval, in (rot, trans) twist ordering.
    """
    if len(keyframes) < 2:
        raise FilterError("need at least two keyframes")
    params = params or EkfParams()
    out = []
    for (t0, s0), (t1, s1) in zip(keyframes[:-1], keyframes[1:]):
        if t1 <= t0:
            raise FilterError("keyframes must be strictly increasing in time")
        delta = compose(inverse(s0.pose), s1.pose)
        dt = t1 - t0
        cov = np.diag([params.odom_rot_rate * dt] * 3 + [params.odom_trans_rate * dt] * 3)
        out.append((delta, cov))
    return out


@dataclass
class FilterResult:
    keyframes: list            # (timestamp, OdomState) at camera times
    orientation: OrientationState
    state: OdomState


def run_filter(log, initial_pose: RigidPose, params: EkfParams | None = None,
               initial_velocity=None, keyframe_times=None) -> FilterResult:
    """Sequential fusion of a SensorLog into camera-time odometry keyframes.

    Keyframes default to the log's image timestamps; pass `keyframe_times`
    to snapshot at other instants. The tilt cue fed to the complementary
    filter is centripetally compensated with the current velocity estimate
    (accel - omega x v_body), which keeps the gravity direction unbiased
    during steady turning.
    """
    params = params or EkfParams()
    orient = OrientationState.from_pose(initial_pose)
    state = initial_odom_state(initial_pose, velocity=initial_velocity)

    if keyframe_times is None:
        keyframe_times = [t for t, _ in log.images]
    events = []
    for t, w in log.gyro:
        events.append((t, 0, "imu", w))
    for t, v in log.dvl:
        events.append((t, 1, "dvl", v))
    for t, d in log.pressure_depth:
        events.append((t, 1, "depth", d))
    for t in keyframe_times:
        events.append((t, 2, "cam", None))
    events.sort(key=lambda e: (e[0], e[1]))
    accel_by_time = {t: a for t, a in log.accel}

    R_dvl = np.eye(3) * params.dvl_sigma ** 2
    keyframes = []
    last_t = events[0][0] if events else 0.0
    last_imu_t = None
    held_accel = None
    prev_omega = None
    for t, _, kind, payload in events:
        dt = t - last_t
        if dt > 0:
            state = ekf_predict(state, orient.attitude, dt, params, accel_body=held_accel)
        last_t = t
        if kind == "imu":
            accel = accel_by_time.get(t)
            omega = np.asarray(payload, dtype=float)
            if accel is not None:
                held_accel = np.asarray(accel, dtype=float)
            dt_imu = None if last_imu_t is None else t - last_imu_t
            last_imu_t = t
            if accel is None or dt_imu is None or dt_imu <= 0:
                prev_omega = omega
                continue
            # midpoint rule keeps gyro integration second-order accurate
            omega_mid = 0.5 * (prev_omega + omega) if prev_omega is not None else omega
            prev_omega = omega
            Rwb = quat_to_matrix(orient.attitude)
            v_body = Rwb.T @ state.velocity
            accel_comp = np.asarray(accel, dtype=float) - np.cross(omega, v_body)
            orient = complementary_update(orient, omega_mid, accel_comp, dt_imu,
                                          gain=params.comp_gain,
                                          bias_gain=params.comp_bias_gain)
            state = OdomState(RigidPose(orient.attitude, state.pose.translation),
                              state.velocity, state.covariance)
        elif kind == "dvl":
            state = ekf_update_dvl(state, payload, R_dvl)
        elif kind == "depth":
            state = ekf_update_depth(state, payload, params.depth_sigma ** 2)
        elif kind == "cam":
            snap = state.copy()
            if prev_omega is not None and last_imu_t is not None and t > last_imu_t:
                # bridge the gap since the last IMU tick with the held rate
                q = quat_multiply(snap.pose.quat, quat_from_rotvec(prev_omega * (t - last_imu_t)))
                snap.pose = RigidPose(q, snap.pose.translation)
            keyframes.append((t, snap))
    return FilterResult(keyframes, orient, state)
