"""Repetition containers, on-disk format, split construction and the synthetic corpus."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import rotation as rot
from .errors import ConfigurationError, DataValidationError, InvalidArgument
from .labeling import assign_label
from .rotation import OrientationTrajectory, resample_trajectory
from .skeleton.kinematics import export_consistent_orientations
from .skeleton.metrics import extract_metrics
from .skeleton.model import PoseSequence

SCHEMA_VERSION = 1
LABELS = (1, 2, 3)
SOURCES = ("real", "augmented")
TRAIN_FRACTION = 0.8


@dataclass(frozen=True, eq=False)
class Repetition:
    repetition_id: str
    subject_id: str
    exercise_id: str
    label: int
    trajectories: dict  # segment id -> OrientationTrajectory, in segment order
    source: str = "real"
    rater_labels: tuple | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.label) not in LABELS:
            raise InvalidArgument(f"{self.repetition_id}: label must be one of {LABELS}, got {self.label!r}")
        object.__setattr__(self, "label", int(self.label))
        if self.source not in SOURCES:
            raise InvalidArgument(f"{self.repetition_id}: source must be one of {SOURCES}")
        if not self.trajectories:
            raise InvalidArgument(f"{self.repetition_id}: no trajectories")
        lengths = {len(t) for t in self.trajectories.values()}
        rates = {float(t.sample_rate) for t in self.trajectories.values()}
        if len(lengths) != 1 or len(rates) != 1:
            raise InvalidArgument(f"{self.repetition_id}: trajectories disagree in length or sample rate")

    @property
    def segment_ids(self):
        return tuple(self.trajectories)

    @property
    def n_frames(self):
        return len(next(iter(self.trajectories.values())))

    @property
    def sample_rate(self):
        return float(next(iter(self.trajectories.values())).sample_rate)

    @property
    def source_id(self):
        """Id of the real repetition this one derives from (itself when real)."""
        return self.provenance.get("source_id", self.repetition_id)

    def samples(self, segment_order=None):
        order = segment_order or self.segment_ids
        return np.stack([self.trajectories[s].samples for s in order], axis=1)


# -- manifest + CSV ----------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_repetition_csv(rep: Repetition, path, segment_order=None):
    order = segment_order or rep.segment_ids
    data = rep.samples(order).reshape(rep.n_frames, -1)
    header = ",".join(["frame"] + [f"{s}_{c}" for s in order for c in "wxyz"])
    frames = np.arange(rep.n_frames)[:, None]
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for f, row in zip(frames[:, 0], data):
            fh.write(f"{f}," + ",".join("%.17g" % v for v in row) + "\n")


def read_repetition_csv(path, segment_order, sample_rate):
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"repetition file not found: {path}")
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DataValidationError(f"{path}: cannot parse numbers ({exc})") from exc
    expected = ["frame"] + [f"{s}_{c}" for s in segment_order for c in "wxyz"]
    if header != expected:
        raise DataValidationError(f"{path}: header does not match the manifest segment list")
    if data.shape[1] != len(expected):
        raise DataValidationError(f"{path}: expected {len(expected)} columns, found {data.shape[1]}")
    q = data[:, 1:].reshape(len(data), len(segment_order), 4)
    norm = np.linalg.norm(q, axis=-1)
    bad = np.argwhere(~(np.abs(norm - 1.0) <= rot.UNIT_TOL))
    if len(bad):
        r, s = bad[0]
        raise DataValidationError(
            f"{path}: non-unit quaternion in data row {r} (frame {int(data[r, 0])}), "
            f"segment {segment_order[s]!r}, norm {norm[r, s]!r}")
    try:
        return {s: OrientationTrajectory(s, sample_rate, q[:, i]) for i, s in enumerate(segment_order)}
    except InvalidArgument as exc:
        raise DataValidationError(f"{path}: {exc}") from exc


INERTIAL_CHANNELS = ("gx", "gy", "gz", "ax", "ay", "az")


def write_inertial_csv(path, segment_order, gyro, accel):
    """Raw stream file: ``frame`` then gyro (rad/s) and accel (m/s^2) triples per segment.

    ``gyro`` and ``accel`` are ``(n, segments, 3)`` arrays.
    """
    gyro = np.asarray(gyro, dtype=float)
    accel = np.asarray(accel, dtype=float)
    n = gyro.shape[0]
    data = np.concatenate([gyro, accel], axis=2).reshape(n, -1)
    header = ",".join(["frame"] + [f"{s}_{c}" for s in segment_order for c in INERTIAL_CHANNELS])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for f, row in enumerate(data):
            fh.write(f"{f}," + ",".join("%.17g" % v for v in row) + "\n")


def read_inertial_csv(path, segment_order):
    """``(gyro, accel)`` arrays of shape ``(n, segments, 3)`` from a raw stream file."""
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"inertial file not found: {path}")
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DataValidationError(f"{path}: cannot parse numbers ({exc})") from exc
    expected = ["frame"] + [f"{s}_{c}" for s in segment_order for c in INERTIAL_CHANNELS]
    if header != expected or data.shape[1] != len(expected):
        raise DataValidationError(f"{path}: header does not match the manifest segment list")
    if len(data) < 2:
        raise DataValidationError(f"{path}: at least 2 samples required")
    bad = np.argwhere(~np.isfinite(data[:, 1:]))
    if len(bad):
        raise DataValidationError(f"{path}: non-finite value in data row {bad[0][0]}")
    v = data[:, 1:].reshape(len(data), len(segment_order), 6)
    return v[..., :3], v[..., 3:]


def save_dataset(reps, path, exercise_id=None, segments=None):
    """Write ``manifest.json`` (at ``path``, or inside it when a directory) plus one CSV per repetition."""
    reps = list(reps)
    path = Path(path)
    if path.suffix != ".json":
        path.mkdir(parents=True, exist_ok=True)
        path = path / "manifest.json"
    root = path.parent
    (root / "reps").mkdir(parents=True, exist_ok=True)
    order = reps[0].segment_ids if reps else ()
    exercise_id = exercise_id or (reps[0].exercise_id if reps else "")
    seg_entries = segments or [{"id": s} for s in order]
    index = []
    for rep in reps:
        if rep.segment_ids != tuple(order):
            raise InvalidArgument(f"{rep.repetition_id}: segment list differs from the dataset")
        rel = f"reps/{rep.repetition_id}.csv"
        write_repetition_csv(rep, root / rel, order)
        entry = {"id": rep.repetition_id, "subject": rep.subject_id, "exercise": rep.exercise_id,
                 "label": rep.label, "source": rep.source, "file": rel, "sample_rate": rep.sample_rate}
        if rep.rater_labels is not None:
            entry["rater_labels"] = list(rep.rater_labels)
        if rep.provenance:
            entry["provenance"] = _jsonable(rep.provenance)
        index.append(entry)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "exercise_id": exercise_id,
        "segments": _jsonable(seg_entries),
        "subjects": sorted({r.subject_id for r in reps}),
        "repetitions": index,
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise DataValidationError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataValidationError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    for key in ("segments", "repetitions"):
        if key not in doc:
            raise DataValidationError(f"{path}: manifest lacks {key!r}")
    return path, doc


def load_dataset(path):
    """Load every repetition indexed by a manifest."""
    path, doc = read_manifest(path)
    order = [s["id"] for s in doc["segments"]]
    reps = []
    for e in doc["repetitions"]:
        try:
            traj = read_repetition_csv(path.parent / e["file"], order, float(e.get("sample_rate", 100.0)))
            reps.append(Repetition(e["id"], e["subject"], e.get("exercise", doc.get("exercise_id", "")), e["label"],
                                   traj, e.get("source", "real"),
                                   tuple(e["rater_labels"]) if e.get("rater_labels") is not None else None,
                                   e.get("provenance", {})))
        except KeyError as exc:
            raise DataValidationError(f"{path}: repetition entry lacks field {exc}") from None
        except InvalidArgument as exc:
            raise DataValidationError(f"{path}: {exc}") from exc
    return reps


# -- splits ------------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    kind: str  # "kfold" or "loso"
    index: int  # fold index, or position of the held-out subject
    train: tuple
    validation: tuple
    test: tuple
    held_out_subject: str | None = None
    flags: tuple = ()

    def __post_init__(self):
        a, b, c = set(self.train), set(self.validation), set(self.test)
        if a & b or a & c or b & c:
            raise InvalidArgument(f"{self.kind} split {self.index}: subsets overlap")


def _by_id(reps):
    return {r.repetition_id: r for r in reps}


def _sorted_ids(reps):
    return sorted(r.repetition_id for r in reps)


def stratified_train_val(reps, rng, train_fraction=TRAIN_FRACTION):
    """Per-class seeded shuffle, then the first ``train_fraction`` of each class trains."""
    by_label = defaultdict(list)
    for r in sorted(reps, key=lambda r: r.repetition_id):
        by_label[r.label].append(r.repetition_id)
    train, val = [], []
    for lab in sorted(by_label):
        ids = list(by_label[lab])
        rng.shuffle(ids)
        n_val = int(round((1.0 - train_fraction) * len(ids)))
        if len(ids) >= 2:
            n_val = max(n_val, 1)
        val += ids[:n_val]
        train += ids[n_val:]
    return tuple(sorted(train)), tuple(sorted(val))


def stratified_kfold(reps, k=5, seed=0):
    """K folds dealt round-robin within every (subject, class) group.

    Each plan tests on one fold; the remaining folds are split into
    train/validation with :func:`stratified_train_val`.
    """
    reps = list(reps)
    if k < 2:
        raise InvalidArgument("k must be >= 2")
    if k > len(reps):
        raise InvalidArgument(f"k={k} exceeds the repetition count {len(reps)}")
    rng = np.random.default_rng(seed)
    groups = defaultdict(list)
    for r in reps:
        groups[(r.subject_id, r.label)].append(r.repetition_id)
    per_subject = defaultdict(int)
    for r in reps:
        per_subject[r.subject_id] += 1
    flags = tuple(f"subject {s} has fewer than k={k} repetitions" for s in sorted(per_subject) if per_subject[s] < k)
    folds = [[] for _ in range(k)]
    pos = 0
    for key in sorted(groups):
        ids = sorted(groups[key])
        rng.shuffle(ids)
        for rid in ids:
            folds[pos % k].append(rid)
            pos += 1
    lookup = _by_id(reps)
    plans = []
    for i in range(k):
        rest = [lookup[rid] for j in range(k) if j != i for rid in folds[j]]
        train, val = stratified_train_val(rest, rng)
        plans.append(SplitPlan("kfold", i, train, val, tuple(sorted(folds[i])), None, flags))
    return plans


def loso_split(reps, seed=0):
    """One plan per subject, holding that subject out as the test set."""
    reps = list(reps)
    subjects = sorted({r.subject_id for r in reps})
    if len(subjects) < 2:
        raise InvalidArgument("leave-one-subject-out needs at least 2 subjects")
    rng = np.random.default_rng(seed)
    plans = []
    for i, s in enumerate(subjects):
        test = tuple(_sorted_ids(r for r in reps if r.subject_id == s))
        train, val = stratified_train_val([r for r in reps if r.subject_id != s], rng)
        plans.append(SplitPlan("loso", i, train, val, test, s))
    return plans


def check_loso(plan: SplitPlan, reps):
    lookup = _by_id(reps)
    leaked = [rid for rid in plan.train + plan.validation if lookup[rid].subject_id == plan.held_out_subject]
    if leaked:
        raise InvalidArgument(f"held-out subject {plan.held_out_subject} appears in train/validation: {leaked}")


def oversample(reps, seed=0, labels=LABELS):
    """Duplicate minority-class repetitions at random until every class matches the majority."""
    reps = list(reps)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    by_label = {lab: [r for r in reps if r.label == lab] for lab in labels}
    empty = [lab for lab, members in by_label.items() if not members]
    if empty:
        raise InvalidArgument(f"cannot oversample: no repetitions of class {empty}")
    target = max(len(m) for m in by_label.values())
    out = list(reps)
    for lab in labels:
        members = by_label[lab]
        need = target - len(members)
        if need > 0:
            picks = rng.integers(0, len(members), size=need)
            out += [members[i] for i in picks]
    return out


# -- classifier input -------------------------------------------------------------------------


def build_input_matrix(rep: Repetition, time_steps=256, segment_order=None):
    """Row-wise ``(4 * segments, time_steps)`` quaternion matrix and the label."""
    order = segment_order or rep.segment_ids
    rows = []
    for s in order:
        q = resample_trajectory(rep.trajectories[s], time_steps).samples
        rows.append(q.T)
    return np.concatenate(rows, axis=0), rep.label


def build_inputs(reps, time_steps=256, segment_order=None, dtype=np.float64):
    reps = list(reps)
    x = np.empty((len(reps), 4 * len(segment_order or reps[0].segment_ids), time_steps), dtype=dtype)
    y = np.empty(len(reps), dtype=np.int64)
    for i, r in enumerate(reps):
        x[i], y[i] = build_input_matrix(r, time_steps, segment_order)
    return x, y


# -- synthetic corpus ---------------------------------------------------------------------------


def builtin_corpus_spec(name):
    res = resources.files("imuaug") / "data" / "corpora" / f"{name}.json"
    if not res.is_file():
        raise ConfigurationError(f"no built-in corpus spec named {name!r}")
    return json.loads(res.read_text())


def resolve_corpus_spec(name_or_path):
    if isinstance(name_or_path, dict):
        return name_or_path
    p = Path(str(name_or_path))
    if p.suffix == ".json" or p.exists():
        try:
            return json.loads(p.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read corpus spec {p}: {exc}") from exc
    return builtin_corpus_spec(str(name_or_path))


def _largest_remainder(total, weights):
    w = np.asarray(weights, dtype=float)
    if total == 0 or w.sum() <= 0:
        return np.zeros(len(w), dtype=int)
    raw = total * w / w.sum()
    base = np.floor(raw).astype(int)
    order = np.argsort(-(raw - base), kind="stable")
    base[order[: total - base.sum()]] += 1
    return base


def corpus_counts(spec, n):
    """``{subject: {label: count}}`` for ``n`` repetitions."""
    subjects = list(spec["subjects"])
    per_subject = _largest_remainder(n, [1.0] * len(subjects))
    default_w = spec.get("class_weights", [1.0, 1.0, 1.0])
    out = {}
    for s, m in zip(subjects, per_subject):
        w = spec.get("subject_class_weights", {}).get(s, default_w)
        out[s] = {lab: int(c) for lab, c in zip(LABELS, _largest_remainder(int(m), w))}
    return out


def _subject_traits(spec, model, rng):
    traits = {}
    off_std = float(spec.get("subject_offset_std", 0.0))
    explicit = spec.get("subject_offsets", {})
    for s in spec["subjects"]:
        off = rng.normal(0.0, off_std, model.n_dofs)
        for dof, v in explicit.get(s, {}).items():
            off[model.dof_index[dof]] = float(v)
        gamma = float(np.exp(rng.normal(0.0, spec.get("subject_timing_std", 0.0))))
        scale = float(1.0 + rng.normal(0.0, spec.get("subject_amplitude_std", 0.0)))
        tilt = rng.normal(0.0, spec.get("subject_tilt_std", 0.0), 3)
        traits[s] = {"offset": off, "gamma": gamma, "scale": scale, "tilt": tilt}
    return traits


def _archetype_arrays(spec, model, label):
    arch = spec["archetypes"][str(label)]
    base = np.zeros(model.n_dofs)
    peak = np.zeros(model.n_dofs)
    for dof, (b, p) in arch.items():
        if dof not in model.dof_index:
            raise ConfigurationError(f"corpus archetype {label} references unknown DoF {dof!r}")
        base[model.dof_index[dof]] = b
        peak[model.dof_index[dof]] = p
    return base, peak


def synth_motion(model, base, peak, traits, n_frames, rng, spec):
    """Joint-angle sequence ``base + (peak - base) * sin^2(pi * u^gamma)`` plus noise, clamped."""
    u = np.linspace(0.0, 1.0, n_frames)
    gamma = traits["gamma"] * float(np.exp(rng.normal(0.0, spec.get("timing_jitter", 0.0))))
    depth = 1.0 + rng.normal(0.0, spec.get("depth_jitter", 0.0))
    amp = traits["scale"] * depth * (1.0 + rng.normal(0.0, spec.get("amplitude_jitter", 0.0), model.n_dofs))
    shape = np.sin(np.pi * u ** gamma) ** 2
    angles = base + traits["offset"] + shape[:, None] * ((peak - base) * amp)
    angles = angles + rng.normal(0.0, spec.get("noise_std", 0.0), angles.shape)
    angles = model.clamp(angles)
    root = np.tile(rot.euler_to_quat(traits["tilt"]), (n_frames, 1))
    return PoseSequence(np.zeros((n_frames, 3)), root, angles)


def synthesize_corpus(model, ruleset, spec, n=None, seed=0):
    """Labeled real-like repetitions from per-class motion archetypes.

    Each repetition is a smooth excursion from the archetype base pose to its
    peak pose with subject-specific offsets, timing and amplitude. Labels come
    from the ruleset; samples whose label disagrees with the intended class
    are redrawn.
    """
    spec = resolve_corpus_spec(spec)
    n = int(spec.get("n", 210) if n is None else n)
    rng = np.random.default_rng(seed)
    counts = corpus_counts(spec, n)
    traits = _subject_traits(spec, model, rng)
    n_frames = int(spec.get("n_frames", 64))
    rate = float(spec.get("sample_rate", 60.0))
    exercise = spec.get("exercise_id", ruleset.exercise_id)
    max_attempts = 100 * max(n, 1)
    attempts = 0
    reps = []
    for s in spec["subjects"]:
        for lab in LABELS:
            base, peak = _archetype_arrays(spec, model, lab) if counts[s][lab] else (None, None)
            k = 0
            while k < counts[s][lab]:
                attempts += 1
                if attempts > max_attempts:
                    raise ConfigurationError(
                        f"corpus archetype for class {lab} keeps failing label agreement "
                        f"(subject {s}, {attempts - 1} attempts)")
                poses = synth_motion(model, base, peak, traits[s], n_frames, rng, spec)
                got, _ = assign_label(extract_metrics(model, poses), ruleset)
                if got != lab:
                    continue
                trajs = export_consistent_orientations(model, poses, rate)
                rid = f"{exercise}_{s}_c{lab}_{k:03d}"
                reps.append(Repetition(rid, s, exercise, lab, trajs, "real",
                                       provenance={"generator": "synthetic", "intended_class": lab}))
                k += 1
    return reps
