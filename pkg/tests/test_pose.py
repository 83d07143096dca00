import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcodom import pose as pc
from pcodom.errors import GimbalLockWarning, NonUnitQuaternion

ALL_CONVENTIONS = [pc.EulerConvention(o, i) for o in ("XYZ", "XZY", "YXZ", "YZX", "ZXY", "ZYX") for i in (True, False)]

angle = st.floats(-math.pi, math.pi, allow_nan=False)
safe_middle = st.floats(-math.pi / 2 + 1e-3, math.pi / 2 - 1e-3, allow_nan=False)
coord = st.floats(-100, 100, allow_nan=False)


def random_pose(rng, scale=10.0):
    q = rng.uniform(-np.pi, np.pi, 3)
    q[1] = rng.uniform(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3)
    return pc.vec6_to_pose(np.concatenate([rng.uniform(-scale, scale, 3), q]))


def brute_force_zyx(q):
    rx, ry, rz = q
    Rx = np.array([[1, 0, 0], [0, math.cos(rx), -math.sin(rx)], [0, math.sin(rx), math.cos(rx)]])
    Ry = np.array([[math.cos(ry), 0, math.sin(ry)], [0, 1, 0], [-math.sin(ry), 0, math.cos(ry)]])
    Rz = np.array([[math.cos(rz), -math.sin(rz), 0], [math.sin(rz), math.cos(rz), 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def close_pose(a, b, tol):
    return np.max(np.abs(a.matrix() - b.matrix())) <= tol


# -- Euler conversions -------------------------------------------------------

def test_zero_angles_give_identity():
    assert np.array_equal(pc.euler_to_rotation([0, 0, 0]), np.eye(3))


def test_half_turn_about_x():
    R = pc.euler_to_rotation([math.pi, 0, 0])
    assert np.allclose(R, np.diag([1.0, -1.0, -1.0]), atol=1e-15)
    assert np.allclose(pc.rotation_to_euler(np.diag([1.0, -1.0, -1.0])), [math.pi, 0, 0])


def test_identity_to_zero_angles():
    assert np.array_equal(pc.rotation_to_euler(np.eye(3)), np.zeros(3))


@given(angle, safe_middle, angle)
@settings(max_examples=200, deadline=None)
def test_default_matches_three_matrix_product(a, b, c):
    q = np.array([a, b, c])
    assert np.allclose(pc.euler_to_rotation(q), brute_force_zyx(q), atol=1e-14)


@pytest.mark.parametrize("conv", ALL_CONVENTIONS, ids=lambda c: c.tag)
def test_round_trip_every_convention(conv):
    rng = np.random.default_rng(7)
    for _ in range(200):
        q = rng.uniform(-np.pi, np.pi, 3)
        mid = conv.product_axes()[1]
        q[mid] = rng.uniform(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3)
        R = pc.euler_to_rotation(q, conv)
        back = pc.rotation_to_euler(R, conv)
        assert np.max(np.abs(pc.euler_to_rotation(back, conv) - R)) < 1e-9
        assert np.max(np.abs(pc.wrap_angle(back - q))) < 1e-9


def test_extrinsic_is_reversed_intrinsic():
    q = np.array([0.3, -0.2, 1.1])
    a = pc.euler_to_rotation(q, pc.EulerConvention("ZYX", intrinsic=True))
    b = pc.euler_to_rotation(q, pc.EulerConvention("XYZ", intrinsic=False))
    assert np.allclose(a, b, atol=1e-15)


def test_rotation_outputs_are_orthonormal_with_unit_determinant():
    rng = np.random.default_rng(1)
    for _ in range(100):
        R = pc.euler_to_rotation(rng.uniform(-10, 10, 3))
        assert pc.orthonormality_error(R) < 1e-9
        assert abs(np.linalg.det(R) - 1) < 1e-9


def test_angles_wrapped_into_half_open_interval():
    w = pc.wrap_angle(np.array([-math.pi, math.pi, 3 * math.pi, -3 * math.pi, 0.5]))
    assert np.allclose(w, [math.pi, math.pi, math.pi, math.pi, 0.5])
    assert np.all(w > -math.pi) and np.all(w <= math.pi)


@pytest.mark.parametrize("pitch", [math.pi / 2, -math.pi / 2])
def test_gimbal_lock_warns_and_zeroes_third_angle(pitch):
    R = pc.euler_to_rotation([0.4, pitch, 0.9])
    with pytest.warns(GimbalLockWarning):
        q = pc.rotation_to_euler(R)
    assert q[0] == 0.0
    assert np.allclose(pc.euler_to_rotation(q), R, atol=1e-9)


def test_no_warning_away_from_gimbal_lock():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pc.rotation_to_euler(pc.euler_to_rotation([0.1, 1.5, 0.2]))


def test_convention_tag_round_trip():
    for conv in ALL_CONVENTIONS:
        assert pc.EulerConvention.from_tag(conv.tag) == conv
    assert pc.DEFAULT_CONVENTION.tag == "intrinsic-ZYX"
    with pytest.raises(ValueError):
        pc.EulerConvention("XXY")


# -- quaternions -------------------------------------------------------------

def test_identity_quaternion():
    assert np.allclose(pc.quaternion_to_euler(1, 0, 0, 0), 0)


def test_half_turn_quaternion_about_x():
    assert np.allclose(pc.quaternion_to_euler(0, 1, 0, 0), [math.pi, 0, 0])


def test_non_unit_quaternion_rejected():
    with pytest.raises(NonUnitQuaternion):
        pc.quaternion_to_euler(1.0, 0.01, 0, 0)
    pc.quaternion_to_euler(1.0 + 5e-7, 0, 0, 0)


def axis_angle_matrix(axis, theta):
    # Rodrigues formula, an independent path to the rotation matrix
    k = np.asarray(axis) / np.linalg.norm(axis)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * K @ K


def test_quaternion_matches_axis_angle_and_matrix_path():
    rng = np.random.default_rng(3)
    for _ in range(300):
        axis = rng.normal(size=3)
        theta = rng.uniform(0, np.pi)
        k = axis / np.linalg.norm(axis)
        w, (x, y, z) = math.cos(theta / 2), math.sin(theta / 2) * k
        R = pc.quaternion_to_matrix(w, x, y, z)
        assert np.max(np.abs(R - axis_angle_matrix(axis, theta))) < 1e-12
        a = pc.quaternion_to_euler(w, x, y, z)
        b = pc.rotation_to_euler(axis_angle_matrix(axis, theta))
        assert np.max(np.abs(pc.euler_to_rotation(a) - pc.euler_to_rotation(b))) < 1e-9


# -- Pose algebra ------------------------------------------------------------

def test_compose_identity_and_inverse():
    rng = np.random.default_rng(0)
    T = random_pose(rng)
    assert close_pose(pc.compose(pc.Pose.identity(), T), T, 1e-15)
    assert close_pose(pc.compose(T, pc.invert(T)), pc.Pose.identity(), 1e-12)


def test_compose_matches_homogeneous_product():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a, b = random_pose(rng), random_pose(rng)
        assert np.max(np.abs(pc.compose(a, b).matrix() - a.matrix() @ b.matrix())) < 1e-12
        p = rng.normal(size=(5, 3))
        assert np.allclose(pc.compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12)


def test_invert_matches_matrix_inverse():
    rng = np.random.default_rng(5)
    for _ in range(100):
        T = random_pose(rng)
        assert np.max(np.abs(pc.invert(T).matrix() - np.linalg.inv(T.matrix()))) < 1e-12
    assert close_pose(pc.invert(pc.Pose.identity()), pc.Pose.identity(), 0)
    t = pc.invert(pc.Pose(np.eye(3), [1.0, -2.0, 3.0]))
    assert np.array_equal(t.translation, [-1.0, 2.0, -3.0]) and np.array_equal(t.rotation, np.eye(3))


def test_relative_pose_examples():
    rng = np.random.default_rng(6)
    T = random_pose(rng)
    assert close_pose(pc.relative_pose(T, T), pc.Pose.identity(), 1e-12)
    assert close_pose(pc.relative_pose(pc.Pose.identity(), T), T, 1e-15)
    for _ in range(100):
        a, b = random_pose(rng), random_pose(rng)
        assert close_pose(pc.compose(a, pc.relative_pose(a, b)), b, 1e-9)


def test_vec6_examples():
    assert np.array_equal(pc.pose_to_vec6(pc.Pose.identity()), np.zeros(6))
    v = pc.pose_to_vec6(pc.Pose(np.eye(3), [1.0, 2.0, 3.0]))
    assert np.array_equal(v, [1, 2, 3, 0, 0, 0])
    assert close_pose(pc.vec6_to_pose([1, 2, 3, 0, 0, 0]), pc.Pose(np.eye(3), [1.0, 2.0, 3.0]), 0)


@given(coord, coord, coord, angle, safe_middle, angle)
@settings(max_examples=300, deadline=None)
def test_vec6_round_trip(x, y, z, a, b, c):
    T = pc.vec6_to_pose([x, y, z, a, b, c])
    assert close_pose(pc.vec6_to_pose(pc.pose_to_vec6(T)), T, 1e-9)


@given(st.lists(st.tuples(coord, coord, coord, angle, safe_middle, angle), min_size=3, max_size=3))
@settings(max_examples=200, deadline=None)
def test_group_laws(vs):
    a, b, c = (pc.vec6_to_pose(v) for v in vs)
    left = pc.compose(pc.compose(a, b), c)
    right = pc.compose(a, pc.compose(b, c))
    # relative to the entry magnitude: translations here reach a few hundred meters
    scale = max(1.0, np.max(np.abs(left.matrix())))
    assert np.max(np.abs(left.matrix() - right.matrix())) / scale < 1e-12
    scale = max(1.0, np.max(np.abs(a.matrix())))
    assert np.max(np.abs(pc.invert(pc.invert(a)).matrix() - a.matrix())) / scale < 1e-12


def test_pose_validation():
    with pytest.raises(ValueError):
        pc.Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        pc.Pose(np.eye(3) * 2, np.zeros(3))
    with pytest.raises(ValueError):
        pc.Pose(np.eye(3), [np.nan, 0, 0])
    nudged = np.eye(3) + 1e-6 * np.random.default_rng(0).normal(size=(3, 3))
    assert pc.orthonormality_error(pc.Pose(nudged, np.zeros(3)).rotation) < 1e-12


def test_poses_are_immutable():
    T = pc.Pose.identity()
    with pytest.raises(ValueError):
        T.rotation[0, 0] = 2.0


# -- trajectories ------------------------------------------------------------

def test_integrate_empty_and_identity_steps():
    start = pc.vec6_to_pose([1, 2, 3, 0.1, 0.2, 0.3])
    assert len(pc.integrate_trajectory(start, [])) == 1
    traj = pc.integrate_trajectory(start, np.zeros((5, 6)))
    assert len(traj) == 6
    assert all(close_pose(T, start, 1e-15) for T in traj)


def test_integrate_follows_compose_recurrence():
    rng = np.random.default_rng(8)
    rels = rng.normal(scale=0.3, size=(20, 6))
    traj = pc.integrate_trajectory(pc.Pose.identity(), rels)
    for i, v in enumerate(rels):
        assert close_pose(traj[i + 1], pc.compose(traj[i], pc.vec6_to_pose(v)), 1e-12)


def test_trajectory_reconstruction_from_own_relatives():
    rng = np.random.default_rng(9)
    traj = [random_pose(rng, scale=500.0) for _ in range(200)]
    rels = [pc.pose_to_vec6(r) for r in pc.relative_poses(traj)]
    rebuilt = pc.integrate_trajectory(traj[0], rels)
    err = max(np.max(np.abs(a.translation - b.translation)) for a, b in zip(rebuilt, traj))
    assert err < 1e-6


def test_long_composition_stays_orthonormal():
    step = pc.vec6_to_pose([0.5, 0.01, 0.0, 0.013, -0.007, 0.021])
    T = pc.Pose.identity()
    for _ in range(10_000):
        T = pc.compose(T, step)
    assert pc.orthonormality_error(T.rotation) < 1e-6
    assert abs(np.linalg.det(T.rotation) - 1) < 1e-9


def test_gram_schmidt_restores_orthonormality():
    R = pc.euler_to_rotation([0.2, 0.3, 0.4]) + 1e-4
    G = pc.gram_schmidt(R)
    assert pc.orthonormality_error(G) < 1e-14
    assert np.allclose(G[:, 0], R[:, 0] / np.linalg.norm(R[:, 0]))


def test_rotation_angle():
    assert pc.rotation_angle(np.eye(3)) == 0.0
    for theta in (1e-8, 0.3, 2.0, math.pi - 1e-6):
        R = axis_angle_matrix([1.0, 2.0, -0.5], theta)
        assert abs(pc.rotation_angle(R) - theta) < 1e-12
