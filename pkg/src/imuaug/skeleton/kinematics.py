"""Forward kinematics over pose sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import rotation as rot
from ..errors import ConfigurationError, InvalidArgument
from ..rotation import OrientationTrajectory
from .model import Pose, PoseSequence, SkeletalModel


@dataclass(frozen=True, eq=False)
class FKResult:
    orientations: np.ndarray  # (n, S, 4) world orientation per segment
    proximal: np.ndarray  # (n, S, 3)
    distal: np.ndarray  # (n, S, 3)


def _as_sequence(poses):
    if isinstance(poses, Pose):
        return PoseSequence.from_poses([poses]), True
    return poses, False


def joint_rotations(model: SkeletalModel, angles) -> np.ndarray:
    """Local joint quaternions ``(n, S, 4)``; the root slot holds the identity."""
    angles = np.atleast_2d(angles)
    n = len(angles)
    out = np.tile(rot.IDENTITY, (n, model.n_segments, 1))
    k = 0
    for i, seg in enumerate(model.segments):
        q = out[:, i]
        for dof in seg.dofs:
            half = 0.5 * angles[:, k]
            r = np.zeros((n, 4))
            r[:, 0] = np.cos(half)
            r[:, 1 + dof.axis] = dof.sign * np.sin(half)
            q = rot.multiply(q, r)
            k += 1
        out[:, i] = q
    return out


def forward_kinematics(model: SkeletalModel, poses) -> FKResult:
    """World orientations and proximal/distal landmark positions of every segment.

    Accepts a single :class:`Pose` (result arrays then have a leading axis of 1)
    or a :class:`PoseSequence`.
    """
    poses, _ = _as_sequence(poses)
    angles = np.asarray(poses.joint_angles, dtype=float)
    if angles.ndim != 2 or angles.shape[1] != model.n_dofs:
        raise InvalidArgument(f"pose has {angles.shape[-1]} joint angles, model {model.name!r} needs {model.n_dofs}")
    n = len(angles)
    local = joint_rotations(model, angles)
    world = np.empty_like(local)
    prox = np.empty((n, model.n_segments, 3))
    dist = np.empty((n, model.n_segments, 3))
    for i, seg in enumerate(model.segments):
        if seg.parent is None:
            world[:, i] = rot.normalize(np.asarray(poses.root_orientation, dtype=float))
            prox[:, i] = poses.root_position
        else:
            p = model.index[seg.parent]
            world[:, i] = rot.multiply(world[:, p], local[:, i])
            prox[:, i] = prox[:, p] + rot.rotate(world[:, p], seg.offset)
        dist[:, i] = prox[:, i] + rot.rotate(world[:, i], seg.direction * seg.length)
    return FKResult(world, prox, dist)


def landmark_positions(model: SkeletalModel, fk: FKResult, landmark: str) -> np.ndarray:
    try:
        seg, local = model.landmarks[landmark]
    except KeyError:
        raise ConfigurationError(f"model {model.name!r} has no landmark {landmark!r}") from None
    i = model.index[seg]
    return fk.proximal[:, i] + rot.rotate(fk.orientations[:, i], local)


def export_consistent_orientations(model: SkeletalModel, poses: PoseSequence, sample_rate=100.0):
    """Model-consistent world orientation trajectory per segment."""
    fk = forward_kinematics(model, poses)
    return {seg.id: OrientationTrajectory(seg.id, sample_rate, fk.orientations[:, i])
            for i, seg in enumerate(model.segments)}
