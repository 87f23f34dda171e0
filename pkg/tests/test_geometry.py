import numpy as np
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from semsplat import geometry

vec3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3)


@given(vec3)
def test_so3_exp_matches_scipy(w):
    R = geometry.so3_exp(w)
    np.testing.assert_allclose(R, Rotation.from_rotvec(w).as_matrix(), atol=1e-12)


@given(vec3)
def test_so3_log_inverts_exp(w):
    w = np.array(w)
    if np.linalg.norm(w) > np.pi - 1e-3:
        w = w / np.linalg.norm(w) * (np.pi - 1e-3)
    np.testing.assert_allclose(geometry.so3_log(geometry.so3_exp(w)), w, atol=1e-7)


@given(vec3, vec3)
def test_se3_exp_small_step_is_first_order(rho, phi):
    xi = np.concatenate([rho, phi]) * 1e-7
    T = geometry.se3_exp(xi)
    np.testing.assert_allclose(T[:3, 3], xi[:3], atol=1e-13)
    np.testing.assert_allclose(T[:3, :3], np.eye(3) + geometry.hat(xi[3:]), atol=1e-13)


def test_invert_and_transform(rng):
    T = geometry.se3_exp(rng.normal(size=6))
    pts = rng.normal(size=(10, 3))
    back = geometry.transform(geometry.invert(T), geometry.transform(T, pts))
    np.testing.assert_allclose(back, pts, atol=1e-12)


@settings(max_examples=50)
@given(st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=4, max_size=4))
def test_quaternion_round_trip(q):
    q = np.array(q)
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    R = geometry.quat_to_rot(q[None])[0]
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(geometry.quat_to_rot(geometry.rot_to_quat(R)[None])[0], R, atol=1e-10)


def test_quat_to_rot_matches_scipy(rng):
    q = rng.normal(size=(20, 4))
    ref = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()
    np.testing.assert_allclose(geometry.quat_to_rot(q), ref, atol=1e-12)


def test_pose_error():
    T = geometry.make_pose(geometry.so3_exp([0.0, 0.0, 0.2]), [0.3, 0.0, 0.4])
    rad, dist = geometry.pose_error(T, np.eye(4))
    assert abs(rad - 0.2) < 1e-12
    assert abs(dist - 0.5) < 1e-12


def test_look_at_points_camera_z_at_target():
    T = geometry.look_at([3.0, 2.0, 1.0], [0.0, 0.5, 0.0])
    p = geometry.transform(geometry.invert(T), np.array([[0.0, 0.5, 0.0]]))[0]
    assert abs(p[0]) < 1e-12 and abs(p[1]) < 1e-12 and p[2] > 0
    # world up maps to camera -y (y points down in the image)
    up_cam = T[:3, :3].T @ np.array([0.0, 1.0, 0.0])
    assert up_cam[1] < 0
