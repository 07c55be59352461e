"""Command-line entry point: ``imuaug <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data validation
error, 3 internal invariant violation (including leakage audit failures).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from . import classifier as clf
from .augmentation import estimate_distributions, generate_set, load_distributions, save_distributions
from .calibration import apply_offset, compute_offset
from .datasets import (build_input_matrix, load_dataset, read_inertial_csv, read_manifest, read_repetition_csv,
                       resolve_corpus_spec, save_dataset, synthesize_corpus, Repetition)
from .errors import (ConfigurationError, DataValidationError, ImuAugError, InsufficientData, InvalidArgument,
                     LeakageError)
from .experiments import ExperimentConfig, run_experiment
from .labeling import optimize_thresholds, resolve_ruleset
from .rotation import IDENTITY, OrientationTrajectory, madgwick_filter
from .skeleton import resolve_model, run_ik
from .skeleton.kinematics import forward_kinematics
from .skeleton.metrics import extract_metrics
from .skeleton.model import Pose, PoseSequence

OUTPUT_ENV = "IMUAUG_OUTPUT_ROOT"
DEFAULT_PER_SOURCE = 30

log = logging.getLogger("imuaug")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def output_root():
    return Path(os.environ.get(OUTPUT_ENV, "imuaug_out"))


def _out_dir(args, name):
    return Path(args.out) if args.out else output_root() / name


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# -- preprocess ---------------------------------------------------------------------------------


def _neutral_references(model, segment_ids):
    fk = forward_kinematics(model, PoseSequence.constant(Pose.neutral(model), 1))
    return {s: fk.orientations[0, model.index[s]] for s in segment_ids if s in model.index}


def _calibrate(traj, seg, rid, refs):
    window = seg.get("calibration_window")
    if window is None:
        raise DataValidationError(f"segment {seg['id']!r} has no calibration_window in the manifest")
    ref = np.asarray(seg.get("reference", refs.get(seg["id"], IDENTITY)), dtype=float)
    try:
        return apply_offset(compute_offset(traj, window, ref), traj)
    except InvalidArgument as exc:
        raise DataValidationError(f"{rid}: segment {seg['id']!r}: {exc}") from exc


def cmd_preprocess(args):
    path, doc = read_manifest(args.input)
    segments = doc["segments"]
    for seg in segments:
        if seg.get("calibration_window") is None:
            raise DataValidationError(f"segment {seg['id']!r} has no calibration_window in the manifest")
    order = [s["id"] for s in segments]
    refs = _neutral_references(resolve_model(args.model), order) if args.model else {}
    kind = doc.get("input", "orientation")
    if kind not in ("orientation", "inertial"):
        raise DataValidationError(f"{path}: unknown input kind {kind!r}")
    out = []
    for e in doc["repetitions"]:
        rate = float(e.get("sample_rate", 100.0))
        if kind == "inertial":
            gyro, accel = read_inertial_csv(path.parent / e["file"], order)
            trajs = {}
            for i, s in enumerate(order):
                q, _ = madgwick_filter(gyro[:, i], accel[:, i], 1.0 / rate, beta=args.beta)
                trajs[s] = OrientationTrajectory(s, rate, q)
        else:
            trajs = read_repetition_csv(path.parent / e["file"], order, rate)
        cal = {seg["id"]: _calibrate(trajs[seg["id"]], seg, e["id"], refs) for seg in segments}
        prov = dict(e.get("provenance", {}))
        prov["preprocessing"] = {"input": kind, "madgwick_beta": args.beta if kind == "inertial" else None}
        try:
            out.append(Repetition(e["id"], e["subject"], e.get("exercise", doc.get("exercise_id", "")), e["label"],
                                  cal, e.get("source", "real"),
                                  tuple(e["rater_labels"]) if e.get("rater_labels") is not None else None, prov))
        except KeyError as exc:
            raise DataValidationError(f"{path}: repetition entry lacks field {exc}") from None
    dest = _out_dir(args, "preprocessed")
    save_dataset(out, dest, doc.get("exercise_id"), [{"id": s} for s in order])
    log.info("wrote %d calibrated repetitions to %s", len(out), dest)
    return 0


# -- augment ----------------------------------------------------------------------------------------


def cmd_augment(args):
    reps = [r for r in load_dataset(args.dataset) if r.source == "real"]
    if not reps:
        raise DataValidationError(f"{args.dataset}: no real repetitions")
    dest = _out_dir(args, "augmented")
    if args.estimate:
        dists = estimate_distributions(reps)
        dest.mkdir(parents=True, exist_ok=True)
        save_distributions(dists, dest / "distributions.json")
    elif args.distributions:
        dists = load_distributions(args.distributions)
    else:
        raise UsageError("augment: give --distributions FILE or --estimate")
    model = resolve_model(args.model)
    ruleset = resolve_ruleset(args.ruleset)
    aug, report = generate_set(reps, args.per_class, dists, model, ruleset, seed=args.seed,
                               max_attempts=args.max_attempts, jobs=args.jobs)
    save_dataset(aug, dest, reps[0].exercise_id, [{"id": s} for s in reps[0].segment_ids])
    _write_json(dest / "report.json", report)
    for c, v in report["per_class"].items():
        log.info("class %s: %d/%d accepted (rate %.3f)", c, v["accepted"], v["requested"], v["acceptance_rate"])
    return 0


# -- optimize ---------------------------------------------------------------------------------------


def labeled_metrics(reps, model):
    return [(extract_metrics(model, run_ik(model, r.trajectories).poses), r.label) for r in reps]


def cmd_optimize(args):
    if args.budget < 1:
        raise UsageError("optimize: --budget must be >= 1")
    reps = [r for r in load_dataset(args.dataset) if r.source == "real"]
    ruleset = resolve_ruleset(args.ruleset)
    model = resolve_model(args.model)
    result = optimize_thresholds(ruleset, labeled_metrics(reps, model), budget=args.budget, seed=args.seed)
    dest = _out_dir(args, "optimize")
    dest.mkdir(parents=True, exist_ok=True)
    result.ruleset.save(dest / "ruleset.json")
    doc = result.to_dict()
    doc.pop("ruleset")
    _write_json(dest / "score.json", doc)
    log.info("GM_F1 %.4f at candidate %d of %d", result.score, result.best_index, result.budget)
    return 0


# -- experiment / finetune ---------------------------------------------------------------------------


def _apply_overrides(doc, args):
    for key in ("scenario", "dataset", "augmented", "distributions", "model", "ruleset", "baseline_dir"):
        v = getattr(args, key, None)
        if v is not None:
            doc[key] = v
    for key in ("time_steps", "train_size", "validation_size", "test_size", "k"):
        v = getattr(args, key, None)
        if v is not None:
            doc[key] = v
    if args.seed_given:
        doc["seed"] = args.seed
    if args.jobs_given:
        doc["jobs"] = args.jobs
    if args.max_epochs is not None:
        doc.setdefault("train", {})["max_epochs"] = args.max_epochs
    for item in args.set or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            doc[key] = json.loads(raw)
        except json.JSONDecodeError:
            doc[key] = raw
    return doc


def cmd_experiment(args):
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read experiment config {args.config}: {exc}") from exc
    cfg = ExperimentConfig.from_dict(_apply_overrides(doc, args))
    dest = _out_dir(args, f"experiment-{cfg.scenario}")
    report = run_experiment(cfg, out_dir=dest, log=log.info)
    agg = report["aggregate"]["macro_f1"]
    log.info("%s macro F1 %.4f +- %.4f over %d folds", cfg.scenario, agg["mean"], agg["std"], agg["n"])
    return 0


def cmd_finetune(args):
    model = clf.load_checkpoint(args.checkpoint)
    steps = model.input_shape[1]
    tune = load_dataset(args.dataset)
    order = [s["id"] for s in read_manifest(args.dataset)[1]["segments"]]

    def matrices(reps):
        x = np.stack([build_input_matrix(r, steps, order)[0] for r in reps])
        return x, np.array([r.label for r in reps])

    val = matrices(load_dataset(args.validation)) if args.validation else None
    cfg = clf.FinetuneConfig(**({"seed": args.seed} | ({"epochs": args.epochs} if args.epochs else {})))
    tuned = clf.finetune(model, matrices(tune), val, cfg)
    dest = _out_dir(args, "finetune")
    dest.mkdir(parents=True, exist_ok=True)
    clf.save_checkpoint(tuned, dest / "checkpoint.npz")
    clf.write_history(tuned, dest / "history.csv")
    if args.test:
        x, y = matrices(load_dataset(args.test))
        doc = {"before": clf.evaluate(model, x, y).to_dict(), "after": clf.evaluate(tuned, x, y).to_dict()}
        _write_json(dest / "evaluation.json", doc)
        log.info("test macro F1 %.4f -> %.4f", doc["before"]["macro_f1"], doc["after"]["macro_f1"])
    return 0


# -- export / synth --------------------------------------------------------------------------------


def cmd_export_features(args):
    path, doc = read_manifest(args.dataset)
    order = [s["id"] for s in doc["segments"]]
    reps = load_dataset(path)
    out = Path(args.out) if args.out else output_root() / "features.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = [f"{s}_{c}_t{t}" for s in order for c in "wxyz" for t in range(args.time_steps)]
    with open(out, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in reps:
            row = build_input_matrix(r, args.time_steps, order)[0].reshape(-1)
            fh.write(",".join("%.17g" % v for v in row) + "\n")
    index = out.with_name(out.stem + ".index.csv")
    with open(index, "w") as fh:
        fh.write("repetition_id,subject_id,label,source\n")
        for r in reps:
            fh.write(f"{r.repetition_id},{r.subject_id},{r.label},{r.source}\n")
    log.info("wrote %d x %d features to %s", len(reps), len(cols), out)
    return 0


def cmd_synth(args):
    spec = resolve_corpus_spec(args.corpus)
    model = resolve_model(args.model or spec.get("model", "lowerbody9"))
    ruleset = resolve_ruleset(args.ruleset or spec.get("ruleset", spec.get("exercise_id", "fde")))
    reps = synthesize_corpus(model, ruleset, spec, n=args.n, seed=args.seed)
    dest = _out_dir(args, "corpus")
    save_dataset(reps, dest, reps[0].exercise_id, [{"id": s} for s in reps[0].segment_ids])
    log.info("wrote %d repetitions to %s", len(reps), dest)
    return 0


# -- parser ----------------------------------------------------------------------------------------


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--jobs", type=int, default=None, help="worker processes (default 1)")
    common.add_argument("--out", help=f"output location (default under ${OUTPUT_ENV} or ./imuaug_out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="imuaug", description="IMU exercise augmentation toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", parents=[common], help="orientation estimation and calibration")
    s.add_argument("input", help="raw dataset manifest")
    s.add_argument("--model", help="skeletal model providing neutral segment orientations")
    s.add_argument("--beta", type=float, default=0.033, help="Madgwick gain for inertial input")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("augment", parents=[common], help="generate labeled augmented repetitions")
    s.add_argument("dataset")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--distributions", help="distribution file")
    g.add_argument("--estimate", action="store_true", help="estimate distributions from the dataset")
    s.add_argument("--per-class", type=int, default=DEFAULT_PER_SOURCE, help="accepted examples per source and class")
    s.add_argument("--max-attempts", type=int, default=50)
    s.add_argument("--model", default="lowerbody9")
    s.add_argument("--ruleset", default="fde")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("optimize", parents=[common], help="random-search rule thresholds")
    s.add_argument("dataset")
    s.add_argument("--ruleset", default="fde")
    s.add_argument("--model", default="lowerbody9")
    s.add_argument("--budget", type=int, default=100_000)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("experiment", parents=[common], help="run one evaluation scenario")
    s.add_argument("--config", help="experiment config JSON")
    s.add_argument("--scenario")
    s.add_argument("--dataset")
    s.add_argument("--augmented")
    s.add_argument("--distributions")
    s.add_argument("--model")
    s.add_argument("--ruleset")
    s.add_argument("--baseline-dir", dest="baseline_dir")
    s.add_argument("--time-steps", dest="time_steps", type=int)
    s.add_argument("--train-size", dest="train_size", type=int)
    s.add_argument("--validation-size", dest="validation_size", type=int)
    s.add_argument("--test-size", dest="test_size", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--max-epochs", dest="max_epochs", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a top-level config key")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("finetune", parents=[common], help="fine-tune the dense layers of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("dataset", help="fine-tuning repetitions")
    s.add_argument("--validation")
    s.add_argument("--test")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("export-features", parents=[common], help="flattened classifier inputs as CSV")
    s.add_argument("dataset")
    s.add_argument("--time-steps", dest="time_steps", type=int, default=256)
    s.set_defaults(func=cmd_export_features)

    s = sub.add_parser("synth", parents=[common], help="synthesize a labeled corpus")
    s.add_argument("--corpus", default="fde", help="built-in corpus name or spec file")
    s.add_argument("--model")
    s.add_argument("--ruleset")
    s.add_argument("--n", type=int)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    args.seed_given = args.seed is not None
    args.jobs_given = args.jobs is not None
    args.seed = 0 if args.seed is None else args.seed
    args.jobs = 1 if args.jobs is None else args.jobs
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, InvalidArgument) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataValidationError, InsufficientData) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except LeakageError as exc:
        print(f"leakage audit failed: {exc}", file=sys.stderr)
        for rid in exc.offending:
            print(f"  {rid}", file=sys.stderr)
        return 3
    except ImuAugError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
