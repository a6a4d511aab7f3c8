import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boneaxisreg.geometry import (
    InvalidPoseError,
    PivotMismatchError,
    Pose6DoF,
    RigidMatrix,
    apply_pose,
    compose,
    euler_to_rotation,
    invert,
    pose_difference,
    pose_to_matrix,
    rotation_from_vector,
    rotation_to_euler,
    rotation_vector,
    wrap_angle_error,
)

trans = st.floats(-100, 100, allow_nan=False)
safe_angle = st.floats(-89, 89, allow_nan=False)
any_angle = st.floats(-720, 720, allow_nan=False)
coord = st.floats(-50, 50, allow_nan=False)


@st.composite
def poses(draw, angle=any_angle, pivot=None):
    p = pivot if pivot is not None else tuple(draw(coord) for _ in range(3))
    return Pose6DoF(*(draw(trans) for _ in range(3)), *(draw(angle) for _ in range(3)), pivot=p)


def homogeneous_oracle(p: Pose6DoF) -> np.ndarray:
    a, b, g = np.radians(p.angles)
    Rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    Ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    Rz = np.array([[np.cos(g), -np.sin(g), 0], [np.sin(g), np.cos(g), 0], [0, 0, 1]])
    H = np.eye(4)
    H[:3, :3] = Rz @ Ry @ Rx
    T1, T2 = np.eye(4), np.eye(4)
    c = np.asarray(p.pivot)
    T1[:3, 3] = -c
    T2[:3, 3] = c + p.translation
    return T2 @ H @ T1


def test_identity_pose_gives_identity_matrix():
    m = pose_to_matrix(Pose6DoF.identity((3.0, -2.0, 7.0)))
    np.testing.assert_allclose(m.homogeneous(), np.eye(4), atol=1e-12)


def test_pure_translation():
    m = pose_to_matrix(Pose6DoF(1, 2, 3))
    np.testing.assert_allclose(m.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(m.translation, [1, 2, 3])


def test_quarter_turn_about_z():
    p = Pose6DoF(r_gamma=90.0)
    np.testing.assert_allclose(apply_pose(p, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-9)


def test_apply_identity_and_reflection_through_pivot_line():
    np.testing.assert_allclose(apply_pose(Pose6DoF.identity(), [5, 5, 5]), [5, 5, 5])
    p = Pose6DoF(r_gamma=180.0, pivot=(1.0, 0.0, 0.0))
    np.testing.assert_allclose(apply_pose(p, [1.0, 1.0, 0.0]), [1.0, -1.0, 0.0], atol=1e-9)


def test_pose_difference_wraps_angles():
    a = Pose6DoF(r_alpha=359.0)
    b = Pose6DoF(r_alpha=1.0)
    np.testing.assert_allclose(pose_difference(a, b), [0, 0, 0, 2, 0, 0], atol=1e-12)
    np.testing.assert_array_equal(pose_difference(a, a), np.zeros(6))


def test_pose_difference_requires_shared_pivot():
    with pytest.raises(PivotMismatchError):
        pose_difference(Pose6DoF(), Pose6DoF(pivot=(1, 0, 0)))


def test_non_finite_pose_rejected():
    with pytest.raises(InvalidPoseError):
        pose_to_matrix(Pose6DoF(tx=float("nan")))


def test_json_round_trip_records_convention():
    p = Pose6DoF(1, 2, 3, 10, -20, 370, pivot=(1, 2, 3))
    d = p.to_dict()
    assert d["convention"] == "ZYX-intrinsic"
    assert d["units"] == {"trans": "mm", "rot": "deg"}
    assert Pose6DoF.from_json(p.to_json()) == p


def test_foreign_convention_rejected():
    d = Pose6DoF().to_dict()
    d["convention"] = "XYZ-extrinsic"
    with pytest.raises(InvalidPoseError):
        Pose6DoF.from_dict(d)


@settings(max_examples=200, deadline=None)
@given(poses(), st.lists(coord, min_size=3, max_size=3))
def test_apply_matches_homogeneous_oracle(p, x):
    expect = (homogeneous_oracle(p) @ np.r_[x, 1.0])[:3]
    np.testing.assert_allclose(apply_pose(p, np.array(x)), expect, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(poses(angle=safe_angle))
def test_matrix_round_trip(p):
    q = Pose6DoF.from_matrix(pose_to_matrix(p), pivot=p.pivot)
    np.testing.assert_allclose(q.as_vector(), p.as_vector(), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(poses())
def test_rotation_is_proper(p):
    R = pose_to_matrix(p).rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


@settings(max_examples=1000, deadline=None)
@given(poses(), poses())
def test_compose_matches_matrix_product(a, b):
    c = compose(a, b)
    np.testing.assert_allclose(pose_to_matrix(c).homogeneous(),
                               pose_to_matrix(a).homogeneous() @ pose_to_matrix(b).homogeneous(), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(poses())
def test_invert_composes_to_identity(p):
    m = pose_to_matrix(compose(p, invert(p)))
    np.testing.assert_allclose(m.homogeneous(), np.eye(4), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(poses(pivot=(0.0, 0.0, 0.0)), poses(pivot=(0.0, 0.0, 0.0)))
def test_pose_difference_symmetric_and_matches_oracle(a, b):
    d = pose_difference(a, b)
    np.testing.assert_allclose(d, pose_difference(b, a), atol=1e-12)
    raw = a.as_vector() - b.as_vector()
    for k in range(3, 6):
        r = abs(raw[k]) % 360.0
        assert abs(d[k] - min(r, 360.0 - r)) < 1e-9
    np.testing.assert_allclose(d[:3], np.abs(raw[:3]))


@settings(max_examples=100, deadline=None)
@given(st.lists(coord, min_size=3, max_size=3))
def test_identity_fixes_every_point(x):
    np.testing.assert_array_equal(apply_pose(Pose6DoF.identity(), np.array(x)), np.array(x))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_rotation_vector_round_trip(w):
    w = np.array(w)
    if np.linalg.norm(w) >= np.pi - 1e-6:
        return
    np.testing.assert_allclose(rotation_vector(rotation_from_vector(w)), w, atol=1e-9)


def test_euler_round_trip_away_from_gimbal_lock():
    for a, b, g in [(10, 20, 30), (-80, 45, 170), (0, -89, 0)]:
        np.testing.assert_allclose(rotation_to_euler(euler_to_rotation(a, b, g)), [a, b, g], atol=1e-7)


def test_wrap_angle_error_range():
    np.testing.assert_allclose(wrap_angle_error([0, 180, 181, -181, 720, 359]), [0, 180, 179, 179, 0, 1])


def test_rigid_matrix_inverse():
    m = pose_to_matrix(Pose6DoF(1, 2, 3, 10, 20, 30, pivot=(4, 5, 6)))
    np.testing.assert_allclose((m @ m.inverse()).homogeneous(), np.eye(4), atol=1e-12)
    assert isinstance(RigidMatrix.identity(), RigidMatrix)
