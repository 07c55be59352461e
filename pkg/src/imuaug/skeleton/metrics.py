"""Kinematic metrics computed from pose sequences for rule-based grading.

Metric kinds (``MetricDef.kind``) and their parameters:

``elevation``
    ``segment``: angle of the long axis above the horizontal plane (rad).
``joint_angle``
    ``dof``: the DoF angle itself.
``height``
    ``landmark``, ``reference``: vertical offset landmark - reference (m).
``distance``
    ``a``, ``b``, ``axes`` (default ``"xy"``): norm of ``b - a`` restricted to
    ``axes``; a single signed component when ``axes`` is one letter.
``displacement``
    ``landmark``, ``axis``, optional ``anchor``: change of the landmark
    coordinate (relative to ``anchor`` when given) since the first frame.
``angle_between``
    ``a``, ``b``: angle between two segment long axes.

Any metric accepts ``absolute: true`` to take the magnitude per frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import rotation as rot
from ..errors import ConfigurationError
from .kinematics import forward_kinematics, landmark_positions
from .model import MetricDef, PoseSequence, SkeletalModel

AXIS_INDEX = {"x": 0, "y": 1, "z": 2}
AGGREGATES = ("min", "max", "mean")


@dataclass(frozen=True, eq=False)
class KinematicMetrics:
    per_frame: dict  # metric id -> (n,) array
    aggregates: dict  # metric id -> {"min", "max", "mean"}

    @classmethod
    def from_per_frame(cls, per_frame):
        per_frame = {k: np.asarray(v, dtype=float) for k, v in per_frame.items()}
        aggregates = {}
        for k, v in per_frame.items():
            mean = float(np.mean(v))
            lo, hi = float(np.min(v)), float(np.max(v))
            # rounding of the mean may step outside [min, max] for constant series
            aggregates[k] = {"min": lo, "max": hi, "mean": min(max(mean, lo), hi)}
        return cls(per_frame, aggregates)

    def value(self, metric_id, aggregate):
        try:
            return self.aggregates[metric_id][aggregate]
        except KeyError:
            raise ConfigurationError(f"metric {metric_id!r} / aggregate {aggregate!r} not available") from None


def _param(m: MetricDef, key):
    try:
        return m.params[key]
    except KeyError:
        raise ConfigurationError(f"metric {m.id!r} ({m.kind}) is missing parameter {key!r}") from None


def _segment_index(model, seg_id, m):
    if seg_id not in model.index:
        raise ConfigurationError(f"metric {m.id!r} references unknown segment {seg_id!r}")
    return model.index[seg_id]


def _direction(model, fk, seg_id, m):
    i = _segment_index(model, seg_id, m)
    return rot.rotate(fk.orientations[:, i], model.segments[i].direction)


def _landmark(model, fk, name, m):
    if name not in model.landmarks:
        raise ConfigurationError(f"metric {m.id!r} references unknown landmark {name!r}")
    return landmark_positions(model, fk, name)


def _evaluate(model, poses, fk, m: MetricDef):
    kind = m.kind
    if kind == "elevation":
        d = _direction(model, fk, _param(m, "segment"), m)
        return np.arcsin(np.clip(d[:, 2], -1.0, 1.0))
    if kind == "joint_angle":
        dof = _param(m, "dof")
        if dof not in model.dof_index:
            raise ConfigurationError(f"metric {m.id!r} references unknown DoF {dof!r}")
        return np.asarray(poses.joint_angles)[:, model.dof_index[dof]]
    if kind == "height":
        p = _landmark(model, fk, _param(m, "landmark"), m)
        r = _landmark(model, fk, _param(m, "reference"), m)
        return p[:, 2] - r[:, 2]
    if kind == "distance":
        delta = _landmark(model, fk, _param(m, "b"), m) - _landmark(model, fk, _param(m, "a"), m)
        axes = m.params.get("axes", "xy")
        idx = [AXIS_INDEX[a] for a in axes]
        if len(idx) == 1:
            return delta[:, idx[0]]
        return np.linalg.norm(delta[:, idx], axis=1)
    if kind == "displacement":
        p = _landmark(model, fk, _param(m, "landmark"), m)
        if m.params.get("anchor"):
            p = p - _landmark(model, fk, m.params["anchor"], m)
        c = p[:, AXIS_INDEX[_param(m, "axis")]]
        return c - c[0]
    if kind == "angle_between":
        da = _direction(model, fk, _param(m, "a"), m)
        db = _direction(model, fk, _param(m, "b"), m)
        return np.arccos(np.clip(np.sum(da * db, axis=1), -1.0, 1.0))
    raise ConfigurationError(f"metric {m.id!r} has unknown kind {kind!r}")


def extract_metrics(model: SkeletalModel, poses: PoseSequence, catalogue=None) -> KinematicMetrics:
    """Per-frame values and min/max/mean aggregates for every catalogued metric.

    ``catalogue`` defaults to the metric list of the model file.
    """
    catalogue = model.metrics if catalogue is None else catalogue
    fk = forward_kinematics(model, poses)
    per_frame = {}
    for m in catalogue:
        v = _evaluate(model, poses, fk, m)
        if m.params.get("absolute"):
            v = np.abs(v)
        per_frame[m.id] = v
    return KinematicMetrics.from_per_frame(per_frame)
