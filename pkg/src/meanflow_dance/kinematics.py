"""Skeletons, 6D rotations, forward kinematics, velocities and foot contacts.

Conventions: y is up, lengths are meters, the ground is the plane
y = ``Skeleton.ground_height``. A motion frame is laid out as
``[root translation (3) | joint 0 rot6d (6) | ... | joint J-1 rot6d (6)]``
where each rot6d holds the first two columns of the local rotation matrix.

Every function has a plain numpy form and, where training needs gradients,
a ``Tensor`` form (``*_t``) built from autodiff primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, ops

DEGENERATE_EPS = 1e-8
CONTACT_HEIGHT = 0.05
CONTACT_SPEED = 0.15
DEFAULT_FPS = 30


class DegenerateRotationError(ValueError):
    """A 6D rotation whose columns are zero or parallel."""

    def __init__(self, frame: int, joint: int, reason: str):
        self.frame = frame
        self.joint = joint
        super().__init__(f"degenerate 6D rotation at frame {frame}, joint {joint}: {reason}")


@dataclass(frozen=True)
class Skeleton:
    name: str
    joint_names: tuple
    parents: tuple
    offsets: np.ndarray = field(repr=False)
    foot_joints: tuple
    ground_height: float = 0.0
    rest_height: float = 0.0
    # named joints used by the geometric features
    head: int = 0
    hands: tuple = ()
    torso: tuple = (0, 0)
    lower_joints: tuple = ()

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        object.__setattr__(self, "offsets", offsets)
        J = len(self.parents)
        if len(self.joint_names) != J or offsets.shape != (J, 3):
            raise ValueError("joint_names, parents and offsets must agree on the joint count")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {j} has parent {p}; parents must precede children")
        if not np.all(np.isfinite(offsets)):
            raise ValueError("offsets must be finite")
        if any(not 0 <= f < J for f in self.foot_joints):
            raise ValueError("foot_joints out of range")

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def motion_dim(self) -> int:
        return 3 + 6 * self.joint_count

    @property
    def upper_joints(self) -> tuple:
        return tuple(j for j in range(self.joint_count) if j not in self.lower_joints)

    def joint_index(self, name: str) -> int:
        return self.joint_names.index(name)

    def channel_group(self, group: str) -> np.ndarray:
        """Motion channel indices of a named group: root, upper, lower or all."""
        if group == "all":
            return np.arange(self.motion_dim)
        if group == "root":
            return np.arange(3)
        if group in ("upper", "lower"):
            joints = self.upper_joints if group == "upper" else self.lower_joints
            return np.concatenate([np.arange(3 + 6 * j, 9 + 6 * j) for j in joints])
        raise ValueError(f"unknown channel group {group!r}; expected root, upper, lower or all")

    def rest_motion(self, frames: int) -> np.ndarray:
        """Identity rotations with the root at its standing height."""
        m = np.zeros((frames, self.motion_dim), dtype=np.float32)
        m[:, 1] = self.rest_height
        m[:, 3:].reshape(frames, self.joint_count, 6)[:] = IDENTITY_6D
        return m

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "joint_names": list(self.joint_names),
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "foot_joints": list(self.foot_joints),
            "ground_height": self.ground_height,
            "rest_height": self.rest_height,
            "head": self.head,
            "hands": list(self.hands),
            "torso": list(self.torso),
            "lower_joints": list(self.lower_joints),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        d = dict(d)
        for key in ("joint_names", "parents", "foot_joints", "hands", "torso", "lower_joints"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


IDENTITY_6D = np.array([1, 0, 0, 0, 1, 0], dtype=np.float32)

THIGH = 0.42
SHIN = 0.42


def toy_skeleton() -> Skeleton:
    """13-joint desk skeleton: a spine with head, two arms and two legs."""
    names = ("root", "spine", "head", "l_shoulder", "l_hand", "r_shoulder", "r_hand",
             "l_hip", "l_knee", "l_foot", "r_hip", "r_knee", "r_foot")
    parents = (-1, 0, 1, 1, 3, 1, 5, 0, 7, 8, 0, 10, 11)
    offsets = [
        (0, 0, 0),
        (0, 0.25, 0),
        (0, 0.35, 0),
        (0.18, 0.22, 0), (0, -0.55, 0),
        (-0.18, 0.22, 0), (0, -0.55, 0),
        (0.10, 0, 0), (0, -THIGH, 0), (0, -SHIN, 0),
        (-0.10, 0, 0), (0, -THIGH, 0), (0, -SHIN, 0),
    ]
    return Skeleton("toy13", names, parents, np.array(offsets), foot_joints=(9, 12),
                    rest_height=THIGH + SHIN, head=2, hands=(4, 6), torso=(0, 2),
                    lower_joints=(0, 7, 8, 9, 10, 11, 12))


def smpl_skeleton() -> Skeleton:
    """24-joint layout with SMPL joint order and approximate neutral offsets."""
    names = ("pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
             "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
             "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
             "l_hand", "r_hand")
    parents = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)
    offsets = [
        (0, 0, 0),
        (0.06, -0.09, 0), (-0.06, -0.09, 0), (0, 0.11, -0.02),
        (0.04, -0.38, 0), (-0.04, -0.38, 0), (0, 0.14, 0),
        (-0.01, -0.40, -0.04), (0.01, -0.40, -0.04), (0, 0.06, 0.02),
        (0.04, -0.05, 0.12), (-0.04, -0.05, 0.12), (0, 0.21, -0.03),
        (0.08, 0.12, -0.01), (-0.08, 0.12, -0.01), (0, 0.09, 0.05),
        (0.12, 0.04, -0.02), (-0.12, 0.04, -0.02), (0.26, 0, -0.02), (-0.26, 0, -0.02),
        (0.25, 0.01, 0), (-0.25, 0.01, 0), (0.08, -0.01, -0.01), (-0.08, -0.01, -0.01),
    ]
    # standing height puts the foot joints on the ground
    rest = 0.09 + 0.38 + 0.40 + 0.05
    return Skeleton("smpl24", names, parents, np.array(offsets), foot_joints=(10, 11),
                    rest_height=rest, head=15, hands=(22, 23), torso=(0, 12),
                    lower_joints=(0, 1, 2, 4, 5, 7, 8, 10, 11))


PRESETS = {"toy13": toy_skeleton, "smpl24": smpl_skeleton}


def get_skeleton(name_or_dict) -> Skeleton:
    if isinstance(name_or_dict, Skeleton):
        return name_or_dict
    if isinstance(name_or_dict, dict):
        return Skeleton.from_dict(name_or_dict)
    try:
        return PRESETS[name_or_dict]()
    except KeyError:
        raise ValueError(f"unknown skeleton preset {name_or_dict!r}; known: {sorted(PRESETS)}") from None


# ------------------------------------------------------------------ rotations

def _check_degenerate(a1: np.ndarray, a2: np.ndarray) -> None:
    n1 = np.linalg.norm(a1, axis=-1)
    # a2's component orthogonal to a1, relative to |a2|
    cross = np.linalg.norm(np.cross(a1, a2), axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    bad1 = n1 < DEGENERATE_EPS
    bad2 = ~bad1 & (cross < DEGENERATE_EPS * np.maximum(n1, 1.0))
    for bad, reason in ((bad1, "first column has zero norm"),
                        (bad2 & (n2 < DEGENERATE_EPS), "second column has zero norm"),
                        (bad2, "columns are parallel")):
        if np.any(bad):
            idx = np.argwhere(bad.reshape(-1, bad.shape[-1]) if bad.ndim > 1 else bad[None])[0]
            raise DegenerateRotationError(int(idx[0]), int(idx[-1]), reason)


def rot6d_to_matrix(r6) -> np.ndarray:
    """Gram-Schmidt map from (..., 6) to rotation matrices (..., 3, 3).

    Columns are b1 = a1/|a1|, b2 = normalized a2 minus its b1 component and
    b3 = b1 x b2. For arrays shaped (T, J, 6) a degenerate entry reports its
    (frame, joint); other shapes report the flattened leading index.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise ValueError(f"rot6d needs a trailing axis of 6, got {r6.shape}")
    a1, a2 = r6[..., :3], r6[..., 3:]
    _check_degenerate(a1, a2)
    b1 = a1 / np.linalg.norm(a1, axis=-1, keepdims=True)
    b2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = b2 / np.linalg.norm(b2, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot6d_to_matrix_t(r6) -> Tensor:
    """Differentiable rot6d_to_matrix on Tensors."""
    r6 = as_tensor(r6)
    _check_degenerate(r6.data[..., :3], r6.data[..., 3:])
    a1, a2 = r6[..., 0:3], r6[..., 3:6]
    b1 = ops.normalize(a1)
    b2 = ops.normalize(ops.sub(a2, ops.mul(ops.sum(ops.mul(b1, a2), axis=-1, keepdims=True), b1)))
    b3 = ops.cross(b1, b2)
    return ops.stack([b1, b2, b3], axis=-1)


def axis_angle_matrix(axis, angle) -> np.ndarray:
    """Rotation matrices about a fixed unit axis for an array of angles."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    angle = np.asarray(angle, dtype=np.float64)[..., None, None]
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


# ------------------------------------------------------------------ FK

def _split(motion, skel: Skeleton):
    if motion.shape[-1] != skel.motion_dim:
        raise ValueError(
            f"motion has {motion.shape[-1]} channels; skeleton {skel.name} needs {skel.motion_dim}")
    lead = motion.shape[:-1]
    return lead, motion[..., :3], motion[..., 3:]


def forward_kinematics(motion, skel: Skeleton) -> np.ndarray:
    """World joint positions (..., T, J, 3) for motion frames (..., T, 3 + 6J)."""
    motion = np.asarray(motion, dtype=np.float64)
    lead, root, rots = _split(motion, skel)
    local = rot6d_to_matrix(rots.reshape(lead + (skel.joint_count, 6)))
    world_R = [None] * skel.joint_count
    pos = np.empty(lead + (skel.joint_count, 3))
    for j, p in enumerate(skel.parents):
        if p < 0:
            world_R[j] = local[..., j, :, :]
            pos[..., j, :] = root
        else:
            world_R[j] = world_R[p] @ local[..., j, :, :]
            pos[..., j, :] = pos[..., p, :] + world_R[p] @ skel.offsets[j]
    return pos


def forward_kinematics_t(motion, skel: Skeleton) -> Tensor:
    """Differentiable forward_kinematics; returns a Tensor (..., T, J, 3)."""
    motion = as_tensor(motion)
    lead, root, rots = _split(motion, skel)
    local = rot6d_to_matrix_t(ops.reshape(rots, lead + (skel.joint_count, 6)))
    world_R = [None] * skel.joint_count
    pos = [None] * skel.joint_count
    for j, p in enumerate(skel.parents):
        Rj = local[..., j, :, :]
        if p < 0:
            world_R[j] = Rj
            pos[j] = root
        else:
            world_R[j] = ops.matmul(world_R[p], Rj)
            off = skel.offsets[j].astype(motion.dtype)
            # R_parent @ offset as a row-wise weighted sum of columns
            pos[j] = ops.add(pos[p], ops.sum(ops.mul(world_R[p], off), axis=-1))
    return ops.stack(pos, axis=-2)


def joint_velocities(pos, fps: float = DEFAULT_FPS) -> np.ndarray:
    """Forward differences along the frame axis (-3) times fps; last frame repeated."""
    pos = np.asarray(pos)
    if pos.shape[-3] < 2:
        raise ValueError("joint_velocities needs at least 2 frames")
    d = np.diff(pos, axis=-3) * fps
    return np.concatenate([d, d[..., -1:, :, :]], axis=-3)


def joint_velocities_t(pos, fps: float = DEFAULT_FPS) -> Tensor:
    pos = as_tensor(pos)
    if pos.shape[-3] < 2:
        raise ValueError("joint_velocities needs at least 2 frames")
    d = ops.mul(ops.sub(pos[..., 1:, :, :], pos[..., :-1, :, :]), float(fps))
    return ops.concat([d, d[..., -1:, :, :]], axis=-3)


def foot_contact_labels(pos, skel: Skeleton, h_thresh: float = CONTACT_HEIGHT,
                        v_thresh: float = CONTACT_SPEED, fps: float = DEFAULT_FPS) -> np.ndarray:
    """Boolean (..., T, n_feet): foot low and slow."""
    pos = np.asarray(pos)
    feet = pos[..., list(skel.foot_joints), :]
    low = feet[..., 1] - skel.ground_height < h_thresh
    speed = np.linalg.norm(joint_velocities(feet, fps), axis=-1)
    return low & (speed < v_thresh)
