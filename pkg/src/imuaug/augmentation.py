"""Class-conditional Euler-angle augmentation with IK projection and relabeling.

Per (exercise, class, segment) the first-frame Euler angles ("offsets") and
the per-axis excursions max - min ("ranges") of the real repetitions are
summarized by a diagonal Gaussian. A candidate rescales the source motion
about its first frame so that each axis covers a sampled target range and
starts from a sampled initial posture, is projected onto the skeletal model
by inverse kinematics, and is kept only if the rule set grades it as the
intended class.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rotation as rot
from .datasets import LABELS, Repetition
from .errors import ConfigurationError, InsufficientData, InvalidArgument
from .labeling import assign_label
from .rotation import OrientationTrajectory
from .skeleton.ik import run_ik
from .skeleton.kinematics import export_consistent_orientations
from .skeleton.metrics import extract_metrics

SCHEMA_VERSION = 1
MAX_ATTEMPTS = 50


class AugmentationWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class SegmentStats:
    offset_mean: np.ndarray
    offset_std: np.ndarray
    range_mean: np.ndarray
    range_std: np.ndarray

    def __post_init__(self):
        for name in ("offset_mean", "offset_std", "range_mean", "range_std"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ConfigurationError(f"{name} must be a finite 3-vector")
            object.__setattr__(self, name, v)
        if (self.offset_std < 0).any() or (self.range_std < 0).any() or (self.range_mean < 0).any():
            raise ConfigurationError("standard deviations and range means must be non-negative")


@dataclass(frozen=True, eq=False)
class AugmentationDistribution:
    exercise_id: str
    class_label: int
    segments: dict  # segment id -> SegmentStats
    n_source: int = 0


@dataclass(frozen=True, eq=False)
class AugmentationParams:
    beta: dict  # segment id -> initial Euler angles
    delta: dict  # segment id -> target ranges (>= 0)


def euler_track(traj: OrientationTrajectory):
    """Unwrapped ``(n, 3)`` roll/pitch/yaw track and its gimbal-degenerate mask."""
    e, degenerate = rot.quat_to_euler(traj.samples, return_degenerate=True)
    return rot.unwrap_euler_track(e), degenerate


def offsets_and_ranges(traj: OrientationTrajectory):
    e, _ = euler_track(traj)
    return e[0].copy(), e.max(axis=0) - e.min(axis=0)


def estimate_distributions(reps, segments=None, min_count=2):
    """Diagonal Gaussian offset/range statistics per (exercise, class, segment).

    Standard deviations use the population convention (``ddof=0``).
    """
    groups = defaultdict(list)
    for r in reps:
        groups[(r.exercise_id, r.label)].append(r)
    out = {}
    for (ex, lab), members in sorted(groups.items()):
        if len(members) < min_count:
            raise InsufficientData(f"exercise={ex}, class={lab}", len(members))
        segs = segments or members[0].segment_ids
        stats = {}
        for s in segs:
            off, rng_ = zip(*(offsets_and_ranges(m.trajectories[s]) for m in members))
            off, rng_ = np.array(off), np.array(rng_)
            stats[s] = SegmentStats(off.mean(axis=0), off.std(axis=0), rng_.mean(axis=0), rng_.std(axis=0))
        out[(ex, lab)] = AugmentationDistribution(ex, lab, stats, len(members))
    return out


def sample_params(dist: AugmentationDistribution, rng) -> AugmentationParams:
    """Independent per-segment draws; sampled ranges are clamped at zero."""
    beta, delta = {}, {}
    for s, st in dist.segments.items():
        beta[s] = st.offset_mean + st.offset_std * rng.standard_normal(3)
        delta[s] = np.maximum(st.range_mean + st.range_std * rng.standard_normal(3), 0.0)
    return AugmentationParams(beta, delta)


@dataclass(frozen=True, eq=False)
class AugmentInfo:
    alpha: np.ndarray
    static_axes: np.ndarray  # axes with observed range below the static threshold
    degenerate_frames: int
    warning: bool  # every axis static: offset-only result


def augment_trajectory(traj: OrientationTrajectory, params, return_info=False):
    """Rescale the Euler excursion of ``traj`` to the target range and shift it to ``beta``.

    ``params`` is an :class:`AugmentationParams` (looked up by segment id) or
    a ``(beta, delta)`` pair.
    """
    if isinstance(params, AugmentationParams):
        try:
            beta, delta = params.beta[traj.segment_id], params.delta[traj.segment_id]
        except KeyError:
            raise ConfigurationError(f"no augmentation parameters for segment {traj.segment_id!r}") from None
    else:
        beta, delta = params
    beta = np.asarray(beta, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if (delta < 0).any():
        raise InvalidArgument("target ranges must be non-negative")
    e, degenerate = euler_track(traj)
    observed = e.max(axis=0) - e.min(axis=0)
    static = observed < rot.STATIC_RANGE
    alpha = np.where(static, 1.0, delta / np.where(static, 1.0, observed))
    aug = (e - e[0]) * alpha + beta
    warn = bool(static.all())
    if warn:
        warnings.warn(f"{traj.segment_id}: trajectory is static on every axis; applying the offset only",
                      AugmentationWarning, stacklevel=2)
    out = traj.with_samples(rot.euler_to_quat(aug))
    if return_info:
        return out, AugmentInfo(alpha, static, int(degenerate.sum()), warn)
    return out


# -- candidate generation ----------------------------------------------------------------


def candidate_seed(master_seed, source_id, target_class, attempt) -> int:
    """Per-candidate seed that depends only on its key, not on scheduling."""
    key = f"{master_seed}|{source_id}|{target_class}|{attempt}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def candidate_id(source_id, target_class, attempt):
    return f"{source_id}~c{target_class}~a{attempt}"


@dataclass(frozen=True)
class Rejection:
    source_id: str
    target_class: int
    assigned_label: int
    attempt: int
    seed: int


def _lookup(dists, exercise, cls):
    try:
        return dists[(exercise, int(cls))]
    except KeyError:
        raise ConfigurationError(f"no augmentation distribution for exercise={exercise!r}, class={cls}") from None


def generate_candidate(source: Repetition, target_class, dists, model, ruleset, seed, attempt=0):
    """One augmented candidate; returns a :class:`Repetition` or a :class:`Rejection`."""
    dist = _lookup(dists, source.exercise_id, target_class)
    missing = [s for s in source.segment_ids if s not in dist.segments]
    if missing:
        raise ConfigurationError(f"distribution for class {target_class} lacks segments {missing}")
    unknown = [s for s in source.segment_ids if s not in model.index]
    if unknown:
        raise ConfigurationError(f"model {model.name!r} has no segments {unknown}")
    rng = np.random.default_rng(seed)
    params = sample_params(AugmentationDistribution(dist.exercise_id, dist.class_label,
                                                    {s: dist.segments[s] for s in source.segment_ids}), rng)
    targets, alphas = {}, {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AugmentationWarning)
        for s in source.segment_ids:
            targets[s], info = augment_trajectory(source.trajectories[s], params, return_info=True)
            alphas[s] = info.alpha
    ik = run_ik(model, targets)
    label, outcomes = assign_label(extract_metrics(model, ik.poses), ruleset)
    if label != int(target_class):
        return Rejection(source.repetition_id, int(target_class), int(label), attempt, seed)
    exported = export_consistent_orientations(model, ik.poses, source.sample_rate)
    trajs = {s: exported[s] for s in source.segment_ids}
    provenance = {
        "source_id": source.source_id,
        "intended_class": int(target_class),
        "assigned_label": int(label),
        "attempt": int(attempt),
        "seed": int(seed),
        "criteria": outcomes,
        "ik_residual": {"mean": float(ik.residuals.mean()), "max": float(ik.residuals.max()),
                        "flagged_frames": int(ik.flagged.sum())},
        "params": {s: {"beta": params.beta[s].tolist(), "delta": params.delta[s].tolist(),
                       "alpha": alphas[s].tolist()} for s in source.segment_ids},
    }
    return Repetition(candidate_id(source.repetition_id, target_class, attempt), source.subject_id,
                      source.exercise_id, int(label), trajs, "augmented", None, provenance)


def _class_counts(per_class_count, classes):
    if isinstance(per_class_count, dict):
        counts = {int(k): int(v) for k, v in per_class_count.items()}
    else:
        counts = {c: int(per_class_count) for c in classes}
    if any(v < 0 for v in counts.values()) or not any(counts.values()):
        raise InvalidArgument("per-class count must be >= 1")
    return counts


def _fill_pair(args):
    source, cls, want, dists, model, ruleset, master_seed, max_attempts = args
    accepted, attempts, rejected_as = [], 0, defaultdict(int)
    for a in range(max_attempts):
        if len(accepted) >= want:
            break
        attempts += 1
        seed = candidate_seed(master_seed, source.repetition_id, cls, a)
        res = generate_candidate(source, cls, dists, model, ruleset, seed, a)
        if isinstance(res, Rejection):
            rejected_as[res.assigned_label] += 1
        else:
            accepted.append(res)
    return accepted, attempts, dict(rejected_as)


def generate_set(sources, per_class_count, dists, model, ruleset, seed=0, max_attempts=MAX_ATTEMPTS,
                 classes=LABELS, jobs=1):
    """Fill every (source, class) pair up to its count, at most ``max_attempts`` tries each.

    Returns ``(repetitions, report)``. Output order and content depend only on
    the inputs and ``seed``; ``jobs`` only changes the wall time.
    """
    counts = _class_counts(per_class_count, classes)
    sources = sorted(sources, key=lambda r: r.repetition_id)
    tasks = [(src, c, counts[c], dists, model, ruleset, seed, int(max_attempts))
             for src in sources for c in sorted(counts) if counts[c] > 0]
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=int(jobs)) as ex:
            results = list(ex.map(_fill_pair, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_fill_pair(t) for t in tasks]

    out = []
    pairs = []
    per_class = {c: {"requested": 0, "accepted": 0, "attempts": 0} for c in sorted(counts)}
    for (src, c, want, *_), (acc, attempts, rejected_as) in zip(tasks, results):
        out += acc
        pairs.append({"source_id": src.repetition_id, "subject_id": src.subject_id, "class": c,
                      "requested": want, "accepted": len(acc), "attempts": attempts,
                      "acceptance_rate": len(acc) / attempts if attempts else 0.0,
                      "rejected_as": {str(k): v for k, v in sorted(rejected_as.items())}})
        per_class[c]["requested"] += want
        per_class[c]["accepted"] += len(acc)
        per_class[c]["attempts"] += attempts
    for c, v in per_class.items():
        v["acceptance_rate"] = v["accepted"] / v["attempts"] if v["attempts"] else 0.0
        v["shortfall"] = v["requested"] - v["accepted"]
    report = {
        "seed": seed,
        "max_attempts": int(max_attempts),
        "per_class_count": {str(k): v for k, v in counts.items()},
        "n_sources": len(sources),
        "accepted": len(out),
        "attempts": sum(p["attempts"] for p in pairs),
        "per_class": {str(k): v for k, v in per_class.items()},
        "unreachable": [[p["source_id"], p["class"]] for p in pairs if p["accepted"] == 0],
        "pairs": pairs,
    }
    return out, report


# -- distribution files ------------------------------------------------------------------


def distributions_to_dict(dists):
    entries = []
    for (ex, lab), d in sorted(dists.items()):
        for s, st in d.segments.items():
            entries.append({"exercise": ex, "class": lab, "segment": s, "n_source": d.n_source,
                            "offset_mean": st.offset_mean.tolist(), "offset_std": st.offset_std.tolist(),
                            "range_mean": st.range_mean.tolist(), "range_std": st.range_std.tolist()})
    return {"schema_version": SCHEMA_VERSION, "distributions": entries}


def distributions_from_dict(doc):
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported distribution schema_version {doc.get('schema_version')!r}")
    groups = defaultdict(dict)
    n_src = {}
    try:
        for e in doc["distributions"]:
            key = (e["exercise"], int(e["class"]))
            groups[key][e["segment"]] = SegmentStats(e["offset_mean"], e["offset_std"], e["range_mean"], e["range_std"])
            n_src[key] = int(e.get("n_source", 0))
    except KeyError as exc:
        raise ConfigurationError(f"distribution entry lacks field {exc}") from None
    return {k: AugmentationDistribution(k[0], k[1], v, n_src[k]) for k, v in groups.items()}


def save_distributions(dists, path):
    Path(path).write_text(json.dumps(distributions_to_dict(dists), indent=1) + "\n")


def load_distributions(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read distribution file {path}: {exc}") from exc
    return distributions_from_dict(doc)
