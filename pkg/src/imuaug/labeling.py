"""Rule-based grading of repetitions and threshold search against expert labels.

A :class:`RuleSet` holds criteria of the form ``aggregate(metric) <cmp>
threshold`` (inclusive comparisons) and an ordered decision table; the first
rule whose required outcomes all hold decides the label, otherwise the
default label applies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvalidArgument

SCHEMA_VERSION = 1
COMPARATORS = (">=", "<=")
DEFAULT_BUDGET = 100_000
CHUNK = 2048


@dataclass(frozen=True)
class Criterion:
    id: str
    metric: str
    aggregate: str
    comparator: str
    threshold: float
    description: str = ""
    search_range: tuple | None = None

    def __post_init__(self):
        if self.aggregate not in ("min", "max", "mean"):
            raise ConfigurationError(f"criterion {self.id!r}: unknown aggregate {self.aggregate!r}")
        if self.comparator not in COMPARATORS:
            raise ConfigurationError(f"criterion {self.id!r}: comparator must be one of {COMPARATORS}")
        if self.search_range is not None:
            lo, hi = (float(v) for v in self.search_range)
            if not lo <= hi:
                raise ConfigurationError(f"criterion {self.id!r}: search range has lo > hi")
            object.__setattr__(self, "search_range", (lo, hi))

    def holds(self, value):
        if self.comparator == ">=":
            return value >= self.threshold
        return value <= self.threshold


@dataclass(frozen=True)
class DecisionRule:
    label: int
    when: dict = field(hash=False)  # criterion id -> required outcome


class RuleSet:
    def __init__(self, exercise_id, criteria, rules, default_label, labels=(1, 2, 3)):
        self.exercise_id = exercise_id
        self.criteria = tuple(criteria)
        self.rules = tuple(rules)
        self.default_label = int(default_label)
        self.labels = tuple(int(v) for v in labels)
        ids = [c.id for c in self.criteria]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"ruleset {exercise_id!r}: duplicate criterion ids")
        if not self.criteria:
            raise ConfigurationError(f"ruleset {exercise_id!r}: no criteria")
        if self.default_label not in self.labels:
            raise ConfigurationError(f"ruleset {exercise_id!r}: default label {self.default_label} not in {self.labels}")
        for r in self.rules:
            if r.label not in self.labels:
                raise ConfigurationError(f"ruleset {exercise_id!r}: rule label {r.label} not in {self.labels}")
            unknown = set(r.when) - set(ids)
            if unknown:
                raise ConfigurationError(f"ruleset {exercise_id!r}: rule references unknown criteria {sorted(unknown)}")

    @property
    def thresholds(self):
        return np.array([c.threshold for c in self.criteria])

    @property
    def metric_ids(self):
        return tuple(dict.fromkeys(c.metric for c in self.criteria))

    def with_thresholds(self, thresholds):
        if isinstance(thresholds, dict):
            thresholds = [thresholds.get(c.id, c.threshold) for c in self.criteria]
        thresholds = [float(v) for v in thresholds]
        if len(thresholds) != len(self.criteria):
            raise InvalidArgument("threshold count does not match the criteria")
        crit = [replace(c, threshold=t) for c, t in zip(self.criteria, thresholds)]
        return RuleSet(self.exercise_id, crit, self.rules, self.default_label, self.labels)

    def decide(self, outcomes):
        """Label for a criterion-id -> bool mapping."""
        for r in self.rules:
            if all(outcomes[k] == bool(v) for k, v in r.when.items()):
                return r.label
        return self.default_label

    # -- (de)serialization

    def to_dict(self):
        crit = []
        for c in self.criteria:
            d = {"id": c.id, "metric": c.metric, "aggregate": c.aggregate, "comparator": c.comparator,
                 "threshold": c.threshold, "description": c.description}
            if c.search_range is not None:
                d["search_range"] = list(c.search_range)
            crit.append(d)
        return {
            "schema_version": SCHEMA_VERSION,
            "exercise_id": self.exercise_id,
            "labels": list(self.labels),
            "criteria": crit,
            "rules": [{"label": r.label, "when": dict(r.when)} for r in self.rules],
            "default_label": self.default_label,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported ruleset schema_version {doc.get('schema_version')!r}")
        if "default_label" not in doc:
            raise ConfigurationError("ruleset needs a default_label so the decision table is total")
        try:
            crit = [Criterion(c["id"], c["metric"], c["aggregate"], c["comparator"], float(c["threshold"]),
                              c.get("description", ""), c.get("search_range")) for c in doc["criteria"]]
            rules = [DecisionRule(int(r["label"]), {k: bool(v) for k, v in r["when"].items()})
                     for r in doc.get("rules", [])]
        except KeyError as exc:
            raise ConfigurationError(f"ruleset is missing field {exc}") from None
        return cls(doc["exercise_id"], crit, rules, doc["default_label"], doc.get("labels", (1, 2, 3)))

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read ruleset {path}: {exc}") from exc
        return cls.from_dict(doc)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def builtin_ruleset(name) -> RuleSet:
    res = resources.files("imuaug") / "data" / "rulesets" / f"{name}.json"
    if not res.is_file():
        raise ConfigurationError(f"no built-in ruleset named {name!r}")
    return RuleSet.from_dict(json.loads(res.read_text()))


def resolve_ruleset(name_or_path) -> RuleSet:
    p = Path(str(name_or_path))
    if p.suffix == ".json" or p.exists():
        return RuleSet.load(p)
    return builtin_ruleset(str(name_or_path))


# -- labeling ------------------------------------------------------------------


def criterion_values(metrics, ruleset: RuleSet) -> np.ndarray:
    """Aggregate value of each criterion's metric, in criterion order."""
    out = np.empty(len(ruleset.criteria))
    for i, c in enumerate(ruleset.criteria):
        if c.metric not in metrics.aggregates:
            raise ConfigurationError(f"criterion {c.id!r} needs metric {c.metric!r}, which was not extracted")
        out[i] = metrics.aggregates[c.metric][c.aggregate]
    return out


def assign_label(metrics, ruleset: RuleSet):
    """Return ``(label, outcomes)`` where outcomes maps criterion id -> fulfilled."""
    values = criterion_values(metrics, ruleset)
    outcomes = {c.id: bool(c.holds(v)) for c, v in zip(ruleset.criteria, values)}
    return ruleset.decide(outcomes), outcomes


def _decide_batch(ruleset: RuleSet, outcomes):
    """Vectorized decision table; ``outcomes`` is ``(..., n_criteria)`` bool."""
    index = {c.id: i for i, c in enumerate(ruleset.criteria)}
    labels = np.full(outcomes.shape[:-1], ruleset.default_label, dtype=np.int64)
    decided = np.zeros(outcomes.shape[:-1], dtype=bool)
    for r in ruleset.rules:
        match = ~decided
        for k, v in r.when.items():
            match &= outcomes[..., index[k]] == bool(v)
        labels[match] = r.label
        decided |= match
    return labels


def _outcomes_batch(ruleset: RuleSet, values, thresholds):
    """``values`` (R, C), ``thresholds`` (B, C) -> outcomes (B, R, C)."""
    ge = np.array([c.comparator == ">=" for c in ruleset.criteria])
    v = values[None, :, :]
    t = thresholds[:, None, :]
    return np.where(ge, v >= t, v <= t)


# -- agreement scores ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true label, columns = assigned label
    labels: tuple = (1, 2, 3)

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] != len(self.labels):
            raise InvalidArgument("confusion matrix must be square and match the label list")
        if c.size == 0:
            raise InvalidArgument("empty confusion matrix")
        if (c < 0).any():
            raise InvalidArgument("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @classmethod
    def from_labels(cls, true, pred, labels=(1, 2, 3)):
        labels = tuple(int(v) for v in labels)
        pos = {v: i for i, v in enumerate(labels)}
        counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
        for t, p in zip(true, pred):
            counts[pos[int(t)], pos[int(p)]] += 1
        return cls(counts, labels)

    def to_list(self):
        return self.counts.tolist()


def _f1_from_counts(tp, n_pred, n_true):
    denom = n_pred + n_true
    return np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 1.0)


def _per_class_f1_counts(c):
    # c has shape (..., L, L); rows are true labels
    tp = np.diagonal(c, axis1=-2, axis2=-1).astype(float)
    return _f1_from_counts(tp, c.sum(axis=-2), c.sum(axis=-1))


def _geometric_mean(f1):
    # any zero F1 annihilates the score; log(0) is never taken
    safe = np.where(f1 > 0, f1, 1.0)
    return np.where((f1 > 0).all(axis=-1), np.exp(np.log(safe).mean(axis=-1)), 0.0)


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    """One-vs-rest F1 per class; a class never predicted and never present scores 1."""
    return _per_class_f1_counts(cm.counts)


def macro_f1(cm: ConfusionMatrix) -> float:
    return float(np.mean(per_class_f1(cm)))


def gm_f1(cm: ConfusionMatrix) -> float:
    """Geometric mean of the per-class F1 scores."""
    return float(_geometric_mean(per_class_f1(cm)))


def gm_f1_many(counts) -> np.ndarray:
    """GM_F1 of a stack of confusion matrices with shape (B, L, L)."""
    c = np.asarray(counts)
    if c.ndim != 3 or c.shape[1] != c.shape[2] or c.shape[1] == 0:
        raise InvalidArgument("expected a stack of square confusion matrices")
    if (c < 0).any():
        raise InvalidArgument("confusion counts must be non-negative")
    return _geometric_mean(_per_class_f1_counts(c.astype(np.int64)))


def _gm_f1_batch(pred, true, labels):
    """GM_F1 for each row of ``pred`` (B, R) against ``true`` (R,)."""
    logs = np.zeros(len(pred))
    zero = np.zeros(len(pred), dtype=bool)
    for lab in labels:
        p = pred == lab
        t = true == lab
        tp = (p & t).sum(axis=1)
        f1 = _f1_from_counts(tp.astype(float), p.sum(axis=1), np.full(len(pred), t.sum()))
        zero |= f1 == 0.0
        with np.errstate(divide="ignore"):
            logs += np.log(np.where(f1 > 0, f1, 1.0))
    score = np.exp(logs / len(labels))
    score[zero] = 0.0
    return score


@dataclass(frozen=True, eq=False)
class LabelerEvaluation:
    confusion: ConfusionMatrix
    gm_f1: float
    per_class_f1: np.ndarray
    assigned: np.ndarray


def _unpack(reps):
    reps = list(reps)
    if not reps:
        raise InvalidArgument("no labeled repetitions given")
    metrics = [m for m, _ in reps]
    labels = np.array([int(lab) for _, lab in reps], dtype=np.int64)
    return metrics, labels


def evaluate_labeler(ruleset: RuleSet, reps) -> LabelerEvaluation:
    """Compare rule-assigned labels with reference labels.

    ``reps`` is a sequence of ``(KinematicMetrics, label)`` pairs.
    """
    metrics, true = _unpack(reps)
    assigned = np.array([assign_label(m, ruleset)[0] for m in metrics], dtype=np.int64)
    cm = ConfusionMatrix.from_labels(true, assigned, ruleset.labels)
    return LabelerEvaluation(cm, gm_f1(cm), per_class_f1(cm), assigned)


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    ruleset: RuleSet
    score: float
    thresholds: np.ndarray
    best_index: int
    budget: int
    seed: int | None
    search_ranges: np.ndarray  # (C, 2)
    trace: list  # (candidate index, running best) at each improvement

    def to_dict(self):
        return {
            "exercise_id": self.ruleset.exercise_id,
            "score": self.score,
            "thresholds": {c.id: float(t) for c, t in zip(self.ruleset.criteria, self.thresholds)},
            "best_index": self.best_index,
            "budget": self.budget,
            "seed": self.seed,
            "search_ranges": {c.id: list(map(float, r)) for c, r in zip(self.ruleset.criteria, self.search_ranges)},
            "improvements": [[int(i), float(s)] for i, s in self.trace],
            "ruleset": self.ruleset.to_dict(),
        }


def search_ranges(ruleset: RuleSet, values) -> np.ndarray:
    """Per-criterion ``[lo, hi]``: explicit ranges from the ruleset, else observed extremes."""
    out = np.empty((len(ruleset.criteria), 2))
    for i, c in enumerate(ruleset.criteria):
        out[i] = c.search_range if c.search_range is not None else (values[:, i].min(), values[:, i].max())
    return out


def optimize_thresholds(ruleset: RuleSet, reps, budget=DEFAULT_BUDGET, seed=0, chunk=CHUNK) -> OptimizationResult:
    """Random search over thresholds maximizing GM_F1 against the reference labels.

    Thresholds are drawn uniformly and independently per criterion from one
    seeded stream, so a larger budget extends the same candidate sequence.
    The first candidate reaching the best score wins.
    """
    if int(budget) < 1:
        raise InvalidArgument("budget must be >= 1")
    budget = int(budget)
    metrics, true = _unpack(reps)
    values = np.array([criterion_values(m, ruleset) for m in metrics])
    ranges = search_ranges(ruleset, values)
    rng = np.random.default_rng(seed)
    best_score, best_idx, best_thr = -1.0, -1, None
    trace = []
    done = 0
    while done < budget:
        k = min(chunk, budget - done)
        thr = rng.uniform(ranges[:, 0], ranges[:, 1], size=(k, len(ranges)))
        pred = _decide_batch(ruleset, _outcomes_batch(ruleset, values, thr))
        scores = _gm_f1_batch(pred, true, ruleset.labels)
        j = int(np.argmax(scores))  # first occurrence of the chunk maximum
        if scores[j] > best_score:
            best_score, best_idx, best_thr = float(scores[j]), done + j, thr[j].copy()
            trace.append((best_idx, best_score))
        done += k
    return OptimizationResult(ruleset.with_thresholds(best_thr), best_score, best_thr, best_idx, budget, seed,
                              ranges, trace)
