"""Kinematic-chain model definition, JSON loading and pose containers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .. import rotation as rot
from ..errors import ConfigurationError, InvalidArgument

SCHEMA_VERSION = 1
AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Dof:
    name: str
    axis: int  # principal axis index in the parent-side joint frame
    sign: float
    lo: float
    hi: float

    @property
    def axis_vector(self):
        v = np.zeros(3)
        v[self.axis] = self.sign
        return v


@dataclass(frozen=True, eq=False)
class Segment:
    id: str
    parent: str | None
    length: float
    direction: np.ndarray  # unit long axis, proximal -> distal, segment frame
    offset: np.ndarray  # joint centre in the parent frame, relative to the parent's proximal point
    joint: str | None = None
    dofs: tuple = ()


@dataclass(frozen=True)
class MetricDef:
    id: str
    kind: str
    params: dict = field(default_factory=dict, hash=False)


def _parse_axis(spec, where):
    if isinstance(spec, str):
        s = spec.strip().lower()
        sign = -1.0 if s.startswith("-") else 1.0
        key = s.lstrip("+-")
        if key in AXES:
            return AXES[key], sign
    raise ConfigurationError(f"{where}: DoF axis must be one of x, y, z with optional sign, got {spec!r}")


class SkeletalModel:
    """Immutable tree of segments with 1-3 rotational DoF per joint.

    The root segment carries the free 6-DoF pose (``Pose.root_*``); every
    other segment hangs from its parent through a joint whose DoF rotations
    are composed intrinsically in the declared order.
    """

    def __init__(self, name, segments, landmarks=None, metrics=(), schema_version=SCHEMA_VERSION):
        self.name = name
        self.schema_version = schema_version
        self.segments = tuple(segments)
        self.index = {s.id: i for i, s in enumerate(self.segments)}
        if len(self.index) != len(self.segments):
            raise ConfigurationError(f"model {name!r}: duplicate segment ids")
        roots = [s.id for s in self.segments if s.parent is None]
        if len(roots) != 1 or self.segments[0].parent is not None:
            raise ConfigurationError(f"model {name!r}: exactly one root, listed first, is required (found {roots})")
        for i, s in enumerate(self.segments[1:], start=1):
            if s.parent not in self.index or self.index[s.parent] >= i:
                raise ConfigurationError(f"model {name!r}: parent of {s.id!r} must be listed before it")
            if not s.dofs:
                raise ConfigurationError(f"model {name!r}: joint of {s.id!r} has no DoF")
            if len(s.dofs) > 3 or len({d.axis for d in s.dofs}) != len(s.dofs):
                raise ConfigurationError(f"model {name!r}: joint of {s.id!r} needs 1-3 distinct axes")
        for s in self.segments:
            if not s.length > 0:
                raise ConfigurationError(f"model {name!r}: segment {s.id!r} length must be positive")
            for d in s.dofs:
                if not d.lo <= d.hi:
                    raise ConfigurationError(f"model {name!r}: DoF {d.name!r} has lo > hi")

        self.dofs = tuple(d for s in self.segments for d in s.dofs)
        self.dof_index = {d.name: i for i, d in enumerate(self.dofs)}
        if len(self.dof_index) != len(self.dofs):
            raise ConfigurationError(f"model {name!r}: duplicate DoF names")

        self.landmarks = {}
        for s in self.segments:
            self.landmarks[f"{s.id}.proximal"] = (s.id, np.zeros(3))
            self.landmarks[f"{s.id}.distal"] = (s.id, s.direction * s.length)
        for lm_id, (seg, pos) in (landmarks or {}).items():
            if seg not in self.index:
                raise ConfigurationError(f"landmark {lm_id!r} references unknown segment {seg!r}")
            self.landmarks[lm_id] = (seg, np.asarray(pos, dtype=float))
        self.metrics = tuple(metrics)
        self._arrays = None

    # -- derived views -----------------------------------------------------

    @property
    def n_segments(self):
        return len(self.segments)

    @property
    def n_dofs(self):
        return len(self.dofs)

    @property
    def segment_ids(self):
        return tuple(s.id for s in self.segments)

    @property
    def limits(self):
        return np.array([[d.lo for d in self.dofs], [d.hi for d in self.dofs]])

    def arrays(self):
        """Flat numeric description consumed by the compiled IK kernels."""
        if self._arrays is None:
            n = self.n_segments
            parent = np.full(n, -1, dtype=np.int64)
            start = np.zeros(n, dtype=np.int64)
            count = np.zeros(n, dtype=np.int64)
            k = 0
            for i, s in enumerate(self.segments):
                if s.parent is not None:
                    parent[i] = self.index[s.parent]
                start[i] = k
                count[i] = len(s.dofs)
                k += len(s.dofs)
            subtree = np.zeros((n, n), dtype=np.bool_)
            for i in range(n - 1, -1, -1):
                subtree[i, i] = True
                if parent[i] >= 0:
                    subtree[parent[i]] |= subtree[i]
            self._arrays = {
                "parent": parent,
                "dof_start": start,
                "dof_count": count,
                "axis": np.array([d.axis for d in self.dofs], dtype=np.int64),
                "sign": np.array([d.sign for d in self.dofs], dtype=float),
                "lo": np.array([d.lo for d in self.dofs], dtype=float),
                "hi": np.array([d.hi for d in self.dofs], dtype=float),
                "subtree": subtree,
            }
        return self._arrays

    def clamp(self, angles):
        lo, hi = self.limits
        return np.clip(angles, lo, hi)

    def metric(self, metric_id) -> MetricDef:
        for m in self.metrics:
            if m.id == metric_id:
                return m
        raise ConfigurationError(f"model {self.name!r} has no metric {metric_id!r}")

    # -- (de)serialization -------------------------------------------------

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported model schema_version {doc.get('schema_version')!r}")
        segments = []
        by_id = {}
        for raw in doc["segments"]:
            sid = raw["id"]
            direction = np.asarray(raw.get("direction", [0.0, 0.0, -1.0]), dtype=float)
            direction = direction / np.linalg.norm(direction)
            length = float(raw["length"])
            parent = raw.get("parent")
            dofs = []
            joint = None
            if parent is not None:
                if parent not in by_id:
                    raise ConfigurationError(f"segment {sid!r}: parent {parent!r} must be listed first")
                joint = raw.get("joint", {})
                for d in joint.get("dofs", []):
                    axis, sign = _parse_axis(d["axis"], f"segment {sid!r}")
                    lo, hi = (float(v) for v in d["limits"])
                    dofs.append(Dof(d["name"], axis, sign, lo, hi))
                joint = joint.get("name", sid)
                if raw.get("offset") is None:
                    p = by_id[parent]
                    offset = p.direction * p.length
                else:
                    offset = np.asarray(raw["offset"], dtype=float)
            else:
                offset = np.zeros(3)
            seg = Segment(sid, parent, length, direction, offset, joint, tuple(dofs))
            by_id[sid] = seg
            segments.append(seg)
        landmarks = {k: (v["segment"], v["position"]) for k, v in doc.get("landmarks", {}).items()}
        metrics = [MetricDef(m["id"], m["kind"], {k: v for k, v in m.items() if k not in ("id", "kind")})
                   for m in doc.get("metrics", [])]
        return cls(doc.get("name", "model"), segments, landmarks, metrics, doc["schema_version"])

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read model file {path}: {exc}") from exc
        return cls.from_dict(doc)

    def subset(self, segment_ids):
        """Model restricted to ``segment_ids`` (must be closed under parents)."""
        keep = [s for s in self.segments if s.id in set(segment_ids)]
        lms = {k: (seg, pos) for k, (seg, pos) in self.landmarks.items()
               if seg in set(segment_ids) and not k.endswith((".proximal", ".distal"))}
        return SkeletalModel(self.name, keep, lms, self.metrics, self.schema_version)


def builtin_model(name) -> SkeletalModel:
    """Load a model shipped with the package (``fullbody15`` or ``lowerbody9``)."""
    res = resources.files("imuaug") / "data" / "models" / f"{name}.json"
    if not res.is_file():
        raise ConfigurationError(f"no built-in model named {name!r}")
    return SkeletalModel.from_dict(json.loads(res.read_text()))


def resolve_model(name_or_path) -> SkeletalModel:
    p = Path(str(name_or_path))
    if p.suffix == ".json" or p.exists():
        return SkeletalModel.load(p)
    return builtin_model(str(name_or_path))


@dataclass(frozen=True, eq=False)
class Pose:
    root_position: np.ndarray
    root_orientation: np.ndarray
    joint_angles: np.ndarray

    @classmethod
    def neutral(cls, model: SkeletalModel) -> "Pose":
        angles = model.clamp(np.zeros(model.n_dofs))
        return cls(np.zeros(3), rot.IDENTITY.copy(), angles)


@dataclass(frozen=True, eq=False)
class PoseSequence:
    """Poses over ``n`` frames: ``(n, 3)``, ``(n, 4)`` and ``(n, n_dofs)`` arrays."""

    root_position: np.ndarray
    root_orientation: np.ndarray
    joint_angles: np.ndarray

    def __post_init__(self):
        n = len(self.joint_angles)
        if len(self.root_position) != n or len(self.root_orientation) != n:
            raise InvalidArgument("pose sequence arrays disagree in length")

    def __len__(self):
        return len(self.joint_angles)

    def __getitem__(self, i) -> Pose:
        return Pose(self.root_position[i], self.root_orientation[i], self.joint_angles[i])

    @classmethod
    def from_poses(cls, poses):
        poses = list(poses)
        return cls(np.array([p.root_position for p in poses], dtype=float),
                   np.array([p.root_orientation for p in poses], dtype=float),
                   np.array([p.joint_angles for p in poses], dtype=float))

    @classmethod
    def constant(cls, pose: Pose, n):
        return cls(np.tile(pose.root_position, (n, 1)), np.tile(pose.root_orientation, (n, 1)),
                   np.tile(pose.joint_angles, (n, 1)))
