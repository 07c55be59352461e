"""Experiment scenarios: splits, augmented-set injection, training and reports.

Scenario names combine the data used for training and testing, R for real
and A for augmented. ``TRATR`` trains on real plus augmented data. LOSO
scenarios hold out one subject per fold, FT scenarios fine-tune the LOSO
baseline of each held-out subject on a handful of that subject's examples.
"""

from __future__ import annotations

import json
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import classifier as clf
from .augmentation import estimate_distributions, generate_set, load_distributions
from .datasets import (LABELS, SplitPlan, build_input_matrix, check_loso, load_dataset, loso_split, oversample,
                       stratified_kfold)
from .errors import ConfigurationError, InvalidArgument, LeakageError
from .labeling import resolve_ruleset
from .skeleton import resolve_model

REPORT_VERSION = 1
KFOLD_SCENARIOS = ("TRTR", "TATR", "TRTA")
LOSO_SCENARIOS = ("TRTR-LOSO", "TRATR-LOSO")
FT_SCENARIOS = ("TRTR-FT", "TRATR-FT")
SCENARIOS = KFOLD_SCENARIOS + LOSO_SCENARIOS + FT_SCENARIOS
NEEDS_AUGMENTED = ("TATR", "TRTA", "TRATR-LOSO", "TRATR-FT")
FT_BASELINE = {"TRTR-FT": "TRTR-LOSO", "TRATR-FT": "TRATR-LOSO"}


@dataclass
class ExperimentConfig:
    scenario: str
    dataset: str | None = None  # manifest of the real repetitions
    augmented: str | None = None  # manifest of a pre-generated augmented pool
    distributions: str | None = None  # used when the pool is generated in-run
    model: str = "lowerbody9"
    ruleset: str = "fde"
    pool_per_class: int = 2  # per source and class, in-run pool only
    max_attempts: int = 50
    train_size: int = 1200
    validation_size: int = 240
    test_size: int = 240
    k: int = 5
    seed: int = 0
    time_steps: int = 256
    oversample: bool = True
    model_config: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    ft_real: int = 2  # held-out examples of the recorded class
    ft_real_per_class: int = 2  # TRTR-FT: real examples per class from training subjects
    ft_aug_missing: int = 8  # TRATR-FT: augmented examples per missing class
    ft_aug_recorded: int = 6  # TRATR-FT: augmented examples of the recorded class
    baseline_dir: str | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}")
        for name in ("train_size", "validation_size", "test_size", "k", "time_steps", "pool_per_class"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        # validate the nested configs early
        self.model_cfg()
        self.train_cfg()
        self.finetune_cfg()

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys: {unknown}")
        if "scenario" not in doc:
            raise ConfigurationError("experiment config lacks 'scenario'")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read experiment config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def echo(self):
        return asdict(self)

    def model_cfg(self):
        return _nested(clf.ModelConfig, self.model_config, "model_config")

    def train_cfg(self):
        return _nested(clf.TrainConfig, self.train, "train")

    def finetune_cfg(self):
        return _nested(clf.FinetuneConfig, self.finetune, "finetune")


def _nested(kind, doc, name):
    try:
        return kind(**doc)
    except TypeError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


# -- augmented-set selection and leakage audit ----------------------------------------------


def _quota(n, labels):
    base, extra = divmod(int(n), len(labels))
    return {lab: base + (1 if i < extra else 0) for i, lab in enumerate(labels)}


def select_augmented(pool, allowed_sources, n, rng, labels=LABELS):
    """Up to ``n`` pool members derived from ``allowed_sources``, balanced over classes and subjects.

    Each class gets an equal share; within a class subjects are visited
    round-robin in sorted order, members of a subject in seeded random order.
    Returns ``(selected, shortfall per class)``.
    """
    allowed = set(allowed_sources)
    groups = defaultdict(lambda: defaultdict(list))
    for r in sorted(pool, key=lambda r: r.repetition_id):
        if r.source_id in allowed:
            groups[r.label][r.subject_id].append(r)
    selected, shortfall = [], {}
    for lab, want in _quota(n, labels).items():
        queues = []
        for s in sorted(groups[lab]):
            members = groups[lab][s]
            queues.append([members[i] for i in rng.permutation(len(members))])
        taken = []
        while len(taken) < want and any(queues):
            for q in queues:
                if q and len(taken) < want:
                    taken.append(q.pop(0))
        selected += taken
        shortfall[str(lab)] = want - len(taken)
    return selected, shortfall


def audit_leakage(plan: SplitPlan, sides):
    """Check that every repetition on a side is real from that side or derived from it.

    ``sides`` maps ``"train"``, ``"validation"`` and ``"test"`` to repetition
    lists. Raises :class:`LeakageError` listing the offending ids; returns the
    number of repetitions checked.
    """
    allowed = {"train": set(plan.train), "validation": set(plan.validation), "test": set(plan.test)}
    offending = []
    checked = 0
    for side, reps in sides.items():
        ok = allowed[side]
        for r in reps:
            checked += 1
            if r.source_id not in ok:
                offending.append(r.repetition_id)
            elif plan.kind == "loso" and side != "test" and r.subject_id == plan.held_out_subject:
                offending.append(r.repetition_id)
    if offending:
        uniq = sorted(set(offending))
        raise LeakageError(f"{plan.kind} split {plan.index}: {len(uniq)} repetition(s) outside their partition: "
                           + ", ".join(uniq[:20]) + (" ..." if len(uniq) > 20 else ""), uniq)
    return checked


# -- data preparation ------------------------------------------------------------------------


class _Inputs:
    """Memoized classifier input matrices keyed by repetition id."""

    def __init__(self, time_steps, segment_order, dtype):
        self.time_steps = time_steps
        self.order = segment_order
        self.dtype = dtype
        self.cache = {}

    def __call__(self, reps):
        reps = list(reps)
        x = np.empty((len(reps), 4 * len(self.order), self.time_steps), dtype=self.dtype)
        y = np.empty(len(reps), dtype=np.int64)
        for i, r in enumerate(reps):
            m = self.cache.get(r.repetition_id)
            if m is None:
                m = build_input_matrix(r, self.time_steps, self.order)[0].astype(self.dtype)
                self.cache[r.repetition_id] = m
            x[i] = m
            y[i] = r.label
        return x, y


def _stats(values):
    v = np.asarray(values, dtype=float)
    return {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": int(v.size)}


def _class_counts(reps):
    c = {str(lab): 0 for lab in LABELS}
    for r in reps:
        c[str(r.label)] += 1
    return c


def _fold_seed(seed, index, salt):
    return int(np.random.SeedSequence([int(seed), int(index), salt]).generate_state(1)[0])


class Experiment:
    """Shared state of one scenario run: data, pool, input cache and config."""

    def __init__(self, cfg: ExperimentConfig, reps=None, pool=None, dists=None):
        self.cfg = cfg
        if reps is None:
            if not cfg.dataset:
                raise ConfigurationError("experiment config lacks 'dataset'")
            reps = load_dataset(cfg.dataset)
        self.reps = [r for r in reps if r.source == "real"]
        if not self.reps:
            raise ConfigurationError("dataset holds no real repetitions")
        self.lookup = {r.repetition_id: r for r in self.reps}
        self.order = self.reps[0].segment_ids
        self.model_cfg = cfg.model_cfg()
        self.train_cfg = cfg.train_cfg()
        self.inputs = _Inputs(cfg.time_steps, self.order, np.dtype(self.model_cfg.dtype))
        self._pool = pool
        self._dists = dists
        self.pool_report = None
        self._skeleton = None
        self._ruleset = None

    @property
    def skeleton(self):
        if self._skeleton is None:
            self._skeleton = resolve_model(self.cfg.model)
        return self._skeleton

    @property
    def ruleset(self):
        if self._ruleset is None:
            self._ruleset = resolve_ruleset(self.cfg.ruleset)
        return self._ruleset

    def distributions(self):
        if self._dists is None:
            if self.cfg.distributions:
                self._dists = load_distributions(self.cfg.distributions)
            else:
                self._dists = estimate_distributions(self.reps, self.order)
        return self._dists

    def pool(self):
        """Augmented candidates for every real repetition, loaded or generated once."""
        if self._pool is None:
            if self.cfg.augmented:
                self._pool = [r for r in load_dataset(self.cfg.augmented) if r.source == "augmented"]
            else:
                self._pool, self.pool_report = generate_set(
                    self.reps, self.cfg.pool_per_class, self.distributions(), self.skeleton, self.ruleset,
                    seed=self.cfg.seed, max_attempts=self.cfg.max_attempts, jobs=self.cfg.jobs)
        return self._pool

    def real(self, ids):
        return [self.lookup[i] for i in ids]

    def plans(self):
        if self.cfg.scenario in KFOLD_SCENARIOS:
            return stratified_kfold(self.reps, self.cfg.k, self.cfg.seed)
        plans = loso_split(self.reps, self.cfg.seed)
        for p in plans:
            check_loso(p, self.reps)
        return plans

    def sides(self, plan: SplitPlan, scenario):
        """Train/validation/test repetitions of one fold and the augmentation shortfall."""
        cfg = self.cfg
        rng = np.random.default_rng(_fold_seed(cfg.seed, plan.index, 1))
        train, val, test = self.real(plan.train), self.real(plan.validation), self.real(plan.test)
        if cfg.oversample:
            # tiny folds may lack a class on one side; balance the classes present
            train = oversample(train, rng, sorted({r.label for r in train}))
            val = oversample(val, rng, sorted({r.label for r in val}))
        short = {}
        if scenario in ("TATR", "TRATR-LOSO", "TRATR-FT"):
            a_train, short["train"] = select_augmented(self.pool(), plan.train, cfg.train_size, rng)
            a_val, short["validation"] = select_augmented(self.pool(), plan.validation, cfg.validation_size, rng)
            if scenario == "TATR":
                train, val = a_train, a_val
            else:
                train, val = train + a_train, val + a_val
        if scenario == "TRTA":
            test, short["test"] = select_augmented(self.pool(), plan.test, cfg.test_size, rng)
        return {"train": train, "validation": val, "test": test}, short

    def fit(self, sides, plan):
        xt, yt = self.inputs(sides["train"])
        xv, yv = self.inputs(sides["validation"])
        model = clf.init_model(self.model_cfg, xt.shape[1:], seed=_fold_seed(self.cfg.seed, plan.index, 2))
        tcfg = clf.TrainConfig(**{**asdict(self.train_cfg), "seed": _fold_seed(self.cfg.seed, plan.index, 3)})
        return clf.train(model, (xt, yt), (xv, yv), tcfg)


def _fold_entry(plan, sides, short, model, ev, checked):
    sel = [h for h in model.history if h.get("selected")]
    return {
        "index": plan.index,
        "kind": plan.kind,
        "held_out_subject": plan.held_out_subject,
        "flags": list(plan.flags),
        "sizes": {k: len(v) for k, v in sides.items()},
        "class_counts": {k: _class_counts(v) for k, v in sides.items()},
        "augmented": {k: sum(r.source == "augmented" for r in v) for k, v in sides.items()},
        "shortfall": short,
        "leakage_checked": checked,
        "epochs": max((h["epoch"] for h in model.history if not h.get("selected")), default=0),
        "selected_epoch": sel[-1]["epoch"] if sel else None,
        **ev.to_dict(),
    }


def _aggregate(folds, key="macro_f1", per_class_key="per_class_f1"):
    per_class = np.array([f[per_class_key] for f in folds], dtype=float)
    return {
        "macro_f1": _stats([f[key] for f in folds]),
        "per_class_f1_mean": per_class.mean(axis=0).tolist(),
        "per_class_f1_std": per_class.std(axis=0).tolist(),
        "confusion_sum": np.sum([f["confusion"] for f in folds], axis=0).tolist(),
    }


def _checkpoint_path(root, scenario, index):
    return Path(root) / f"{scenario}_fold{index}.npz"


def run_fold_scenario(exp: Experiment, out_dir=None, log=None):
    scenario = exp.cfg.scenario
    folds = []
    for plan in exp.plans():
        sides, short = exp.sides(plan, scenario)
        checked = audit_leakage(plan, sides)
        model = exp.fit(sides, plan)
        xs, ys = exp.inputs(sides["test"])
        ev = clf.evaluate(model, xs, ys)
        folds.append(_fold_entry(plan, sides, short, model, ev, checked))
        if out_dir is not None:
            ck = Path(out_dir) / "checkpoints"
            ck.mkdir(parents=True, exist_ok=True)
            clf.save_checkpoint(model, _checkpoint_path(ck, scenario, plan.index))
            clf.write_history(model, ck / f"{scenario}_fold{plan.index}_history.csv")
        if log:
            log(f"{scenario} fold {plan.index}: macro F1 {ev.macro_f1:.4f}")
    return folds, _aggregate(folds)


def _recorded_class(reps, n_needed):
    counts = defaultdict(int)
    for r in reps:
        counts[r.label] += 1
    # majority class, ties to the lower label; it must leave test examples behind
    order = sorted(counts, key=lambda lab: (-counts[lab], lab))
    for lab in order:
        if counts[lab] > n_needed:
            return lab
    return None


def _baseline(exp: Experiment, plan, baseline_scenario, out_dir):
    cfg = exp.cfg
    for root in [cfg.baseline_dir, Path(out_dir) / "checkpoints" if out_dir else None]:
        if root and _checkpoint_path(root, baseline_scenario, plan.index).is_file():
            model = clf.load_checkpoint(_checkpoint_path(root, baseline_scenario, plan.index))
            if model.input_shape != (4 * len(exp.order), cfg.time_steps):
                raise ConfigurationError(f"baseline checkpoint input shape {model.input_shape} does not match "
                                         f"the experiment ({4 * len(exp.order)}, {cfg.time_steps})")
            return model, "loaded"
    sides, _ = exp.sides(plan, baseline_scenario)
    audit_leakage(plan, sides)
    model = exp.fit(sides, plan)
    if out_dir is not None:
        ck = Path(out_dir) / "checkpoints"
        ck.mkdir(parents=True, exist_ok=True)
        clf.save_checkpoint(model, _checkpoint_path(ck, baseline_scenario, plan.index))
    return model, "trained"


def run_finetune_scenario(exp: Experiment, out_dir=None, log=None):
    cfg = exp.cfg
    scenario = cfg.scenario
    fcfg = cfg.finetune_cfg()
    folds = []
    for plan in exp.plans():
        held = exp.real(plan.test)
        rng = np.random.default_rng(_fold_seed(cfg.seed, plan.index, 4))
        recorded = _recorded_class(held, cfg.ft_real)
        if recorded is None:
            folds.append({"index": plan.index, "held_out_subject": plan.held_out_subject, "skipped": True,
                          "reason": f"no class with more than {cfg.ft_real} repetitions"})
            continue
        members = sorted((r for r in held if r.label == recorded), key=lambda r: r.repetition_id)
        picked = [members[i] for i in sorted(rng.choice(len(members), cfg.ft_real, replace=False))]
        picked_ids = {r.repetition_id for r in picked}
        test = [r for r in held if r.repetition_id not in picked_ids]
        missing = [lab for lab in LABELS if lab != recorded]

        tune = list(picked)
        gen_report = None
        if scenario == "TRTR-FT":
            train_side = exp.real(plan.train)
            for lab in LABELS:
                pool = sorted((r for r in train_side if r.label == lab), key=lambda r: r.repetition_id)
                take = min(cfg.ft_real_per_class, len(pool))
                tune += [pool[i] for i in sorted(rng.choice(len(pool), take, replace=False))]
            tune_plan = SplitPlan("ft", plan.index, tuple(sorted(picked_ids | set(plan.train))), plan.validation,
                                  tuple(r.repetition_id for r in test), plan.held_out_subject)
        else:
            per_src = {lab: -(-cfg.ft_aug_missing // len(picked)) for lab in missing}
            per_src[recorded] = -(-cfg.ft_aug_recorded // len(picked))
            aug, gen_report = generate_set(picked, per_src, exp.distributions(), exp.skeleton, exp.ruleset,
                                           seed=_fold_seed(cfg.seed, plan.index, 5), max_attempts=cfg.max_attempts,
                                           jobs=cfg.jobs)
            want = {lab: cfg.ft_aug_missing for lab in missing}
            want[recorded] = cfg.ft_aug_recorded
            for lab in LABELS:
                got = [r for r in aug if r.label == lab][: want[lab]]
                tune += got
            tune_plan = SplitPlan("ft", plan.index, tuple(sorted(picked_ids)), plan.validation,
                                  tuple(r.repetition_id for r in test), plan.held_out_subject)
        checked = audit_leakage(tune_plan, {"train": tune, "test": test})

        baseline, how = _baseline(exp, plan, FT_BASELINE[scenario], out_dir)
        xs, ys = exp.inputs(test)
        before = clf.evaluate(baseline, xs, ys)
        # a subject the baseline already classifies perfectly is left alone
        finetuned = before.macro_f1 < 1.0
        after = before
        if finetuned:
            xv, yv = exp.inputs(exp.real(plan.validation))
            tuned = clf.finetune(baseline, exp.inputs(tune), (xv, yv),
                                 clf.FinetuneConfig(**{**asdict(fcfg), "seed": _fold_seed(cfg.seed, plan.index, 6)}))
            after = clf.evaluate(tuned, xs, ys)
        entry = {
            "index": plan.index,
            "held_out_subject": plan.held_out_subject,
            "recorded_class": int(recorded),
            "tune_real_held_out": sorted(picked_ids),
            "tune_counts": {"real_held_out": len(picked),
                            "real_other": sum(r.source == "real" for r in tune) - len(picked),
                            "augmented": sum(r.source == "augmented" for r in tune)},
            "tune_class_counts": _class_counts(tune),
            "augmented_shortfall": ({str(lab): want[lab] - sum(r.label == lab and r.source == "augmented"
                                                                for r in tune) for lab in LABELS}
                                    if gen_report is not None else None),
            "n_test": len(test),
            "baseline_source": how,
            "finetuned": finetuned,
            "leakage_checked": checked,
            "baseline": before.to_dict(),
            **after.to_dict(),
            "delta_macro_f1": after.macro_f1 - before.macro_f1,
        }
        folds.append(entry)
        if log:
            log(f"{scenario} subject {plan.held_out_subject}: {before.macro_f1:.4f} -> {after.macro_f1:.4f}")
    done = [f for f in folds if not f.get("skipped")]
    if not done:
        raise ConfigurationError("no held-out subject has enough repetitions for fine-tuning")
    agg = _aggregate(done)
    agg["baseline_macro_f1"] = _stats([f["baseline"]["macro_f1"] for f in done])
    return folds, agg


def run_experiment(cfg: ExperimentConfig, out_dir=None, reps=None, pool=None, dists=None, log=None):
    """Run one scenario and return its report dict.

    The report depends only on the config, the data and the seeds. When
    ``out_dir`` is given the report is written to ``report.json`` there and
    the wall time to ``runtime.json`` next to it.
    """
    start = time.perf_counter()
    exp = Experiment(cfg, reps, pool, dists)
    if cfg.scenario in FT_SCENARIOS:
        folds, agg = run_finetune_scenario(exp, out_dir, log)
    else:
        folds, agg = run_fold_scenario(exp, out_dir, log)
    report = {
        "report_version": REPORT_VERSION,
        "scenario": cfg.scenario,
        "config": cfg.echo(),
        "seeds": {"master": cfg.seed, "split": cfg.seed, "augmentation": cfg.seed,
                  "fold_seed_rule": "SeedSequence([master, fold, salt])"},
        "dataset": {"n_real": len(exp.reps), "segments": list(exp.order),
                    "class_counts": _class_counts(exp.reps),
                    "subjects": sorted({r.subject_id for r in exp.reps})},
        "augmented_pool": ({"n": len(exp._pool), "class_counts": _class_counts(exp._pool)}
                           if exp._pool is not None else None),
        "folds": folds,
        "aggregate": agg,
    }
    if exp.pool_report is not None:
        report["augmented_pool"]["acceptance"] = {k: v for k, v in exp.pool_report.items() if k != "pairs"}
    if out_dir is not None:
        write_report(report, out_dir, time.perf_counter() - start)
    return report


def write_report(report, out_dir, runtime=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    if runtime is not None:
        (out / "runtime.json").write_text(json.dumps({"seconds": round(float(runtime), 3)}) + "\n")
    return path


def check_report(report):
    """Recompute aggregate statistics from the per-fold entries; raises on mismatch."""
    done = [f for f in report["folds"] if not f.get("skipped")]
    want = _stats([f["macro_f1"] for f in done])
    got = report["aggregate"]["macro_f1"]
    if abs(want["mean"] - got["mean"]) > 1e-12 or abs(want["std"] - got["std"]) > 1e-12 or want["n"] != got["n"]:
        raise InvalidArgument(f"aggregate {got} disagrees with per-fold entries {want}")
    return True
