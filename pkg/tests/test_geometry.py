import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rosemap.geometry import (
    BehindCameraError,
    GeometryError,
    LogMapBranchError,
    PinholeCamera,
    RigidPose,
    Twist,
    camera_point_pose_jacobian,
    compose,
    inverse,
    project,
    project_point_jacobian,
    project_world_point,
    quat_from_rotvec,
    quat_multiply,
    se3_adjoint,
    se3_exp,
    se3_log,
    se3_right_jacobian_inv,
)

RNG = np.random.default_rng(12345)


def random_pose(rng, max_angle=math.pi - 1e-3, max_trans=10.0) -> RigidPose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return se3_exp(Twist(axis * angle, rng.uniform(-max_trans, max_trans, size=3)))


@st.composite
def twists(draw, max_angle=math.pi - 1e-3):
    angle = draw(st.floats(0.0, max_angle))
    ax = np.array([draw(st.floats(-1, 1)) for _ in range(3)])
    if np.linalg.norm(ax) < 1e-6:
        ax = np.array([1.0, 0.0, 0.0])
    ax = ax / np.linalg.norm(ax)
    trans = np.array([draw(st.floats(-5, 5)) for _ in range(3)])
    return Twist(ax * angle, trans)


class TestExpLog:
    def test_zero_twist_is_identity(self):
        p = se3_exp(Twist.zero())
        assert np.allclose(p.quat, [1, 0, 0, 0], atol=1e-12)
        assert np.allclose(p.translation, 0, atol=1e-12)

    def test_quarter_turn_yaw(self):
        # Rodrigues by hand: 90 deg about z maps x->y
        p = se3_exp(Twist(np.array([0, 0, math.pi / 2]), np.zeros(3)))
        R = p.rotation_matrix()
        assert np.allclose(R @ np.array([1, 0, 0]), [0, 1, 0], atol=1e-12)
        assert np.allclose(p.translation, 0, atol=1e-12)

    def test_log_identity(self):
        xi = se3_log(RigidPose.identity())
        assert np.allclose(xi.as_vector(), 0, atol=1e-12)

    def test_log_pure_translation(self):
        p = RigidPose(np.array([1, 0, 0, 0]), np.array([1.0, 2.0, 3.0]))
        xi = se3_log(p)
        assert np.allclose(xi.rotational, 0, atol=1e-12)
        assert np.allclose(xi.translational, [1, 2, 3], atol=1e-12)

    def test_log_near_pi(self):
        eps = 1e-4
        axis = np.array([1.0, 0.0, 0.0])
        p = se3_exp(Twist(axis * (math.pi - eps), np.zeros(3)))
        xi = se3_log(p)
        assert abs(np.linalg.norm(xi.rotational) - (math.pi - eps)) < 1e-9

    def test_log_at_pi_raises(self):
        q = quat_from_rotvec(np.array([math.pi, 0, 0]))
        p = RigidPose(q, np.zeros(3))
        with pytest.raises(LogMapBranchError):
            se3_log(p)

    @settings(max_examples=200, deadline=None)
    @given(twists())
    def test_round_trip(self, xi):
        back = se3_log(se3_exp(xi))
        assert np.allclose(back.as_vector(), xi.as_vector(), atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_exp_of_log(self, seed):
        rng = np.random.default_rng(seed)
        p = random_pose(rng)
        p2 = se3_exp(se3_log(p))
        assert np.allclose(p2.quat, p.quat, atol=1e-9)
        assert np.allclose(p2.translation, p.translation, atol=1e-9)


class TestGroupLaws:
    def test_identity_neutral(self):
        p = random_pose(np.random.default_rng(0))
        for q in (compose(RigidPose.identity(), p), compose(p, RigidPose.identity())):
            assert np.allclose(q.quat, p.quat, atol=1e-12)
            assert np.allclose(q.translation, p.translation, atol=1e-12)

    def test_inverse(self):
        p = random_pose(np.random.default_rng(1))
        r = compose(p, inverse(p))
        assert np.allclose(r.quat, [1, 0, 0, 0], atol=1e-9)
        assert np.allclose(r.translation, 0, atol=1e-9)

    def test_two_quarter_yaws(self):
        quarter = se3_exp(Twist(np.array([0, 0, math.pi / 2]), np.zeros(3)))
        half = compose(quarter, quarter)
        expected = quat_from_rotvec(np.array([0, 0, math.pi - 1e-15]))
        assert np.allclose(half.quat, expected, atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_associativity(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = compose(compose(a, b), c)
        rhs = compose(a, compose(b, c))
        assert np.allclose(lhs.quat, rhs.quat, atol=1e-9)
        assert np.allclose(lhs.translation, rhs.translation, atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_unit_norm_preserved(self, seed):
        rng = np.random.default_rng(seed)
        p = compose(random_pose(rng), random_pose(rng))
        assert abs(np.linalg.norm(p.quat) - 1.0) < 1e-9


class TestProjection:
    CAM = PinholeCamera(fx=100.0, fy=100.0, cx=50.0, cy=40.0, width=100, height=80)

    def test_optical_axis(self):
        pix, depth = project(self.CAM, np.array([0, 0, 2.0]))
        assert np.allclose(pix, [50, 40])
        assert depth == 2.0

    def test_offset_point(self):
        pix, _ = project(self.CAM, np.array([1.0, 0.0, 1.0]))
        assert np.allclose(pix, [150.0, 40.0])

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project(self.CAM, np.array([0, 0, -1.0]))

    def test_invalid_camera(self):
        with pytest.raises(GeometryError):
            PinholeCamera(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)

    def test_point_jacobian_matches_fd(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5)])
            J = project_point_jacobian(self.CAM, p)
            h = 1e-6
            for k in range(3):
                dp = np.zeros(3)
                dp[k] = h
                hi, _ = project(self.CAM, p + dp)
                lo, _ = project(self.CAM, p - dp)
                fd = (hi - lo) / (2 * h)
                assert np.allclose(J[:, k], fd, rtol=1e-4, atol=1e-6)

    def test_pose_jacobian_matches_fd(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            pose = random_pose(rng, max_angle=2.0, max_trans=2.0)
            # keep the point in front of the camera
            p_cam = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 4)])
            point_world = pose.apply(p_cam)
            J_pt = project_point_jacobian(self.CAM, p_cam)
            J_pose = J_pt @ camera_point_pose_jacobian(pose, point_world)
            h = 1e-6
            for k in range(6):
                d = np.zeros(6)
                d[k] = h
                hi, _ = project_world_point(self.CAM, compose(se3_exp(Twist.from_vector(d)), pose), point_world)
                lo, _ = project_world_point(self.CAM, compose(se3_exp(Twist.from_vector(-d)), pose), point_world)
                fd = (hi - lo) / (2 * h)
                denom = np.maximum(np.abs(fd), 1e-3)
                assert np.all(np.abs(J_pose[:, k] - fd) / denom < 1e-4)


class TestJacobians:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_right_jacobian_inverse_fd(self, seed):
        rng = np.random.default_rng(seed)
        xi = Twist(rng.uniform(-1.5, 1.5, 3), rng.uniform(-3, 3, 3))
        base = se3_exp(xi)
        Jr_inv = se3_right_jacobian_inv(xi)
        h = 1e-6
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            hi = se3_log(compose(base, se3_exp(Twist.from_vector(d)))).as_vector()
            lo = se3_log(compose(base, se3_exp(Twist.from_vector(-d)))).as_vector()
            fd = (hi - lo) / (2 * h)
            denom = np.maximum(np.abs(fd), 1e-3)
            assert np.all(np.abs(Jr_inv[:, k] - fd) / denom < 1e-4)

    def test_adjoint_identity(self):
        p = random_pose(np.random.default_rng(3))
        xi = Twist(np.array([0.1, -0.2, 0.3]), np.array([0.5, 0.1, -0.4]))
        lhs = compose(compose(p, se3_exp(xi)), inverse(p))
        rhs = se3_exp(Twist.from_vector(se3_adjoint(p) @ xi.as_vector()))
        assert np.allclose(lhs.quat, rhs.quat, atol=1e-9)
        assert np.allclose(lhs.translation, rhs.translation, atol=1e-9)


def test_quat_multiply_matches_matrix():
    rng = np.random.default_rng(4)
    a, b = random_pose(rng), random_pose(rng)
    Rab = compose(a, b).rotation_matrix()
    assert np.allclose(Rab, a.rotation_matrix() @ b.rotation_matrix(), atol=1e-12)
    q = quat_multiply(a.quat, b.quat)
    assert abs(abs(np.dot(q, compose(a, b).quat)) - 1.0) < 1e-12
