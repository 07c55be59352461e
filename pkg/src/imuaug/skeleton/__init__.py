"""Kinematic chain model, forward/inverse kinematics and metric extraction."""

from .ik import IKResult, fit_pose, run_ik
from .kinematics import FKResult, export_consistent_orientations, forward_kinematics, landmark_positions
from .metrics import KinematicMetrics, extract_metrics
from .model import Dof, MetricDef, Pose, PoseSequence, Segment, SkeletalModel, builtin_model, resolve_model

__all__ = [
    "Dof", "FKResult", "IKResult", "KinematicMetrics", "MetricDef", "Pose", "PoseSequence", "Segment",
    "SkeletalModel", "builtin_model", "export_consistent_orientations", "extract_metrics", "fit_pose",
    "forward_kinematics", "landmark_positions", "resolve_model", "run_ik",
]
