import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from meanflow_dance.autodiff import Tape, Tensor, jvp, relative_error
from meanflow_dance.kinematics import (DegenerateRotationError, Skeleton, axis_angle_matrix,
                                       foot_contact_labels, forward_kinematics, forward_kinematics_t,
                                       get_skeleton, joint_velocities, matrix_to_rot6d,
                                       rot6d_to_matrix, smpl_skeleton, toy_skeleton)

from oracles import naive_fk, qr_rotation, random_motion

vec6 = hnp.arrays(np.float64, 6, elements=st.floats(-5, 5)).filter(
    lambda v: np.linalg.norm(np.cross(v[:3], v[3:])) > 1e-3 and np.linalg.norm(v[:3]) > 1e-3)


@settings(max_examples=60, deadline=None)
@given(vec6)
def test_rot6d_gives_a_proper_rotation(v):
    R = rot6d_to_matrix(v)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(R, qr_rotation(v), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(vec6)
def test_rot6d_round_trip_is_a_projection(v):
    R = rot6d_to_matrix(v)
    np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(R)), R, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(vec6, st.floats(0.1, 10))
def test_rot6d_is_scale_invariant_per_column(v, s):
    w = v.copy()
    w[:3] *= s
    np.testing.assert_allclose(rot6d_to_matrix(w), rot6d_to_matrix(v), atol=1e-10)


def test_degenerate_rotation_reports_frame_and_joint():
    m = np.tile(np.array([1, 0, 0, 0, 1, 0], float), (4, 3, 1))
    m[2, 1] = [1, 0, 0, 2, 0, 0]
    with pytest.raises(DegenerateRotationError) as e:
        rot6d_to_matrix(m)
    assert (e.value.frame, e.value.joint) == (2, 1)
    m[2, 1] = 0
    with pytest.raises(DegenerateRotationError, match="zero norm"):
        rot6d_to_matrix(m)


@pytest.mark.parametrize("name", ["toy13", "smpl24"])
def test_rest_pose_stands_on_the_ground(name):
    skel = get_skeleton(name)
    pos = forward_kinematics(skel.rest_motion(3), skel)
    feet = pos[:, list(skel.foot_joints), 1]
    np.testing.assert_allclose(feet, skel.ground_height, atol=0.02)
    assert pos[0, skel.head, 1] > pos[0, 0, 1]


def test_fk_matches_naive_chain(skel):
    rng = np.random.default_rng(0)
    m = random_motion(rng, 5, skel)
    np.testing.assert_allclose(forward_kinematics(m, skel), naive_fk(m, skel), atol=1e-10)


def test_fk_handles_batch_axes(skel):
    rng = np.random.default_rng(1)
    m = rng.standard_normal((2, 3, 4, skel.motion_dim))
    pos = forward_kinematics(m, skel)
    assert pos.shape == (2, 3, 4, skel.joint_count, 3)
    np.testing.assert_allclose(pos[1, 2], forward_kinematics(m[1, 2], skel))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.floats(-np.pi, np.pi))
def test_fk_is_equivariant_to_root_yaw(seed, yaw):
    skel = toy_skeleton()
    m = random_motion(np.random.default_rng(seed), 2, skel)
    R = axis_angle_matrix([0, 1, 0], yaw)
    m2 = m.copy()
    r6 = m2[:, 3:9]
    m2[:, 3:9] = matrix_to_rot6d(R @ rot6d_to_matrix(r6))
    m2[:, :3] = m[:, :3] @ R.T
    np.testing.assert_allclose(forward_kinematics(m2, skel), forward_kinematics(m, skel) @ R.T, atol=1e-9)


def test_bone_lengths_are_preserved(skel):
    m = random_motion(np.random.default_rng(2), 6, skel)
    pos = forward_kinematics(m, skel)
    for j, p in enumerate(skel.parents[1:], start=1):
        np.testing.assert_allclose(np.linalg.norm(pos[:, j] - pos[:, p], axis=-1),
                                   np.linalg.norm(skel.offsets[j]), atol=1e-10)


def test_tensor_fk_matches_numpy_and_is_differentiable(skel):
    rng = np.random.default_rng(3)
    m = random_motion(rng, 3, skel)
    x = Tensor(m, requires_grad=True)
    with Tape() as tape:
        pos = forward_kinematics_t(x, skel)
    np.testing.assert_allclose(pos.data, forward_kinematics(m, skel), atol=1e-12)
    w = rng.standard_normal(pos.shape)
    (g,) = tape.gradient(pos, [x], seed=w)
    v = rng.standard_normal(m.shape)
    h = 1e-6
    fd = (forward_kinematics(m + h * v, skel) - forward_kinematics(m - h * v, skel)) / (2 * h)
    assert float((g * v).sum()) == pytest.approx(float((w * fd).sum()), rel=1e-6)
    _, d = jvp(lambda a: forward_kinematics_t(a, skel), [Tensor(m)], [v])
    assert relative_error(d, fd) < 1e-6


def test_joint_velocities_repeat_the_last_frame():
    pos = np.arange(4.0)[:, None, None] ** 2 * np.ones((4, 2, 3))
    vel = joint_velocities(pos, fps=10)
    np.testing.assert_allclose(vel[:, 0, 0], [10, 30, 50, 50])
    with pytest.raises(ValueError):
        joint_velocities(pos[:1])


def test_contact_labels_need_low_and_slow(skel):
    T = 5
    pos = np.zeros((T, skel.joint_count, 3))
    pos[:, skel.foot_joints[0], 1] = 0.01
    pos[:, skel.foot_joints[1], 1] = 0.01
    pos[:, skel.foot_joints[1], 0] = np.arange(T) * 0.1  # 3 m/s
    c = foot_contact_labels(pos, skel)
    assert c[:, 0].all() and not c[:, 1].any()
    pos[:, skel.foot_joints[0], 1] = 0.5
    assert not foot_contact_labels(pos, skel)[:, 0].any()


def test_skeleton_validation_and_groups():
    skel = toy_skeleton()
    groups = {g: set(skel.channel_group(g)) for g in ("root", "upper", "lower", "all")}
    assert groups["root"] == {0, 1, 2}
    assert groups["upper"].isdisjoint(groups["lower"])
    assert groups["root"] | groups["upper"] | groups["lower"] == groups["all"]
    with pytest.raises(ValueError):
        skel.channel_group("arms")
    with pytest.raises(ValueError):
        Skeleton("bad", ("a", "b"), (-1, 1), np.zeros((2, 3)), ())
    assert Skeleton.from_dict(skel.to_dict()).to_dict() == skel.to_dict()
    assert smpl_skeleton().motion_dim == 147 and skel.motion_dim == 81
    with pytest.raises(ValueError):
        get_skeleton("nope")
