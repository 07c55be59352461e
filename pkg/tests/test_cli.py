import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from imuaug import cli, rotation as rot
from imuaug import experiments
from imuaug.classifier import ModelConfig, init_model, load_checkpoint, save_checkpoint
from imuaug.datasets import Repetition, load_dataset, save_dataset, write_inertial_csv
from imuaug.labeling import RuleSet

SMALL = {"filters": 2, "kernel": 3, "dense1": 8, "dense2": 6, "dtype": "float64"}


def raw_manifest(root, reps, window=(0, 10), **extra):
    save_dataset(reps, root)
    man = root / "manifest.json"
    doc = json.loads(man.read_text())
    for seg in doc["segments"]:
        if window is not None:
            seg["calibration_window"] = list(window)
    doc.update(extra)
    man.write_text(json.dumps(doc))
    return man


@pytest.fixture(scope="module")
def fde_dir(tmp_path_factory, fde_small):
    root = tmp_path_factory.mktemp("fde")
    save_dataset(fde_small, root)
    return root


def test_usage_errors_exit_one(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["optimize", "whatever", "--budget", "0"]) == 1
    assert cli.main(["--version"]) == 0
    assert "error" in capsys.readouterr().err


def test_missing_dataset_exits_two(tmp_path):
    assert cli.main(["augment", str(tmp_path / "nope"), "--estimate", "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key_exits_one(tmp_path, fde_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scenario": "TRTR", "dataset": str(fde_dir), "bogus": 1}))
    assert cli.main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


# -- preprocess -------------------------------------------------------------------


def test_preprocess_identity_offset_keeps_samples(tmp_path):
    q = np.vstack([np.tile(rot.IDENTITY, (10, 1)), Rotation.random(30, random_state=1).as_quat(scalar_first=True)])
    q2 = np.vstack([np.tile(rot.IDENTITY, (10, 1)), Rotation.random(30, random_state=2).as_quat(scalar_first=True)])
    rep = Repetition("r0", "s1", "ex", 2, {"pelvis": rot.OrientationTrajectory("pelvis", 50.0, q),
                                           "torso": rot.OrientationTrajectory("torso", 50.0, q2)})
    man = raw_manifest(tmp_path / "raw", [rep])
    assert cli.main(["preprocess", str(man), "--out", str(tmp_path / "cal")]) == 0
    back = load_dataset(tmp_path / "cal")[0]
    for s, ref in (("pelvis", q), ("torso", q2)):
        err = rot.angle_between(back.trajectories[s].samples, ref)
        assert err.max() < 1e-9
    assert back.provenance["preprocessing"]["input"] == "orientation"


def test_preprocess_missing_window_names_segment(tmp_path, capsys):
    rep = Repetition("r0", "s1", "ex", 1, {"femur_r": rot.OrientationTrajectory("femur_r", 50.0,
                                                                                np.tile(rot.IDENTITY, (5, 1)))})
    man = raw_manifest(tmp_path / "raw", [rep], window=None)
    assert cli.main(["preprocess", str(man), "--out", str(tmp_path / "cal")]) == 2
    assert "femur_r" in capsys.readouterr().err


def strapdown(q_start, omega, n, dt):
    """Body-frame gyro and accelerometer streams for a constant body-rate rotation."""
    step = rot.from_axis_angle(omega / np.linalg.norm(omega), np.linalg.norm(omega) * dt)
    truth = np.empty((n, 4))
    q = q_start
    static = 20
    for i in range(n):
        if i >= static:
            q = rot.normalize(rot.multiply(q, step))
        truth[i] = q
    gyro = np.zeros((n, 3))
    gyro[static:] = omega  # sample i drives the step into frame i
    accel = 9.81 * rot.rotate(rot.conjugate(truth), np.array([0.0, 0.0, 1.0]))
    return truth, gyro, accel


def test_preprocess_inertial_stream_tracks_truth(tmp_path):
    dt = 0.01
    q_start = rot.euler_to_quat([0.3, -0.2, 0.0])
    truth, gyro, accel = strapdown(q_start, np.array([0.4, 0.2, 0.9]), 200, dt)
    raw = tmp_path / "raw"
    raw.mkdir()
    write_inertial_csv(raw / "r0.csv", ["tibia_r"], gyro[:, None], accel[:, None])
    doc = {"schema_version": 1, "exercise_id": "fde", "input": "inertial",
           "segments": [{"id": "tibia_r", "calibration_window": [0, 20], "reference": q_start.tolist()}],
           "repetitions": [{"id": "r0", "subject": "s1", "label": 3, "file": "r0.csv", "sample_rate": 1 / dt}]}
    (raw / "manifest.json").write_text(json.dumps(doc))
    assert cli.main(["preprocess", str(raw), "--out", str(tmp_path / "cal")]) == 0
    out = load_dataset(tmp_path / "cal")[0]
    err = rot.angle_between(out.trajectories["tibia_r"].samples, truth)
    assert err.max() < 0.05
    assert out.provenance["preprocessing"]["madgwick_beta"] == 0.033


# -- augment / optimize -----------------------------------------------------------


def test_augment_estimate_is_reproducible(tmp_path, fde_small):
    src = tmp_path / "src"
    save_dataset([r for r in fde_small if r.subject_id == "s02"], src)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["augment", str(src), "--estimate", "--per-class", "1", "--max-attempts", "20",
                         "--seed", "4", "--out", str(out)]) == 0
        runs.append(out)
    a, b = ((r / "manifest.json").read_text() for r in runs)
    assert a == b
    report = json.loads((runs[0] / "report.json").read_text())
    reps = load_dataset(runs[0])
    assert len(reps) == sum(v["accepted"] for v in report["per_class"].values())
    assert all(r.source == "augmented" for r in reps)
    assert (runs[0] / "distributions.json").is_file()


def test_augment_without_distributions_is_usage_error(tmp_path, fde_dir):
    assert cli.main(["augment", str(fde_dir), "--out", str(tmp_path / "o")]) == 1


def test_optimize_writes_reloadable_ruleset(tmp_path, fde_dir):
    out = tmp_path / "opt"
    assert cli.main(["optimize", str(fde_dir), "--budget", "50", "--out", str(out)]) == 0
    rs = RuleSet.load(out / "ruleset.json")
    score = json.loads((out / "score.json").read_text())
    assert 0.0 <= score["score"] <= 1.0
    assert rs.to_dict()["rules"]


# -- export / finetune / synth ----------------------------------------------------


def test_export_features_shape_and_repeatability(tmp_path, fde_dir, fde_small):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["export-features", str(fde_dir), "--time-steps", "32", "--out", str(a)]) == 0
    assert cli.main(["export-features", str(fde_dir), "--time-steps", "32", "--out", str(b)]) == 0
    lines = a.read_text().splitlines()
    assert len(lines) == 1 + len(fde_small)
    assert all(len(line.split(",")) == 4 * 9 * 32 for line in lines)
    assert a.read_bytes() == b.read_bytes()
    index = (tmp_path / "a.index.csv").read_text().splitlines()
    assert index[1].split(",")[0] == fde_small[0].repetition_id


def test_finetune_command(tmp_path, fde_small):
    model = init_model(ModelConfig(**SMALL), (36, 16), seed=0)
    save_checkpoint(model, tmp_path / "base.npz")
    tune, test = tmp_path / "tune", tmp_path / "test"
    save_dataset([r for r in fde_small if r.subject_id == "s03"][:3], tune)
    save_dataset([r for r in fde_small if r.subject_id == "s03"][3:], test)
    out = tmp_path / "ft"
    assert cli.main(["finetune", str(tmp_path / "base.npz"), str(tune), "--test", str(test), "--epochs", "8",
                     "--out", str(out)]) == 0
    tuned = load_checkpoint(out / "checkpoint.npz")
    assert np.array_equal(tuned.params["conv_w"], model.params["conv_w"])
    doc = json.loads((out / "evaluation.json").read_text())
    assert set(doc) == {"before", "after"}


def test_synth_command(tmp_path):
    out = tmp_path / "corpus"
    assert cli.main(["synth", "--corpus", "fde", "--n", "21", "--seed", "2", "--out", str(out)]) == 0
    reps = load_dataset(out)
    assert len(reps) == 21
    assert {r.label for r in reps} == {1, 2, 3}


# -- leakage ----------------------------------------------------------------------


def test_corrupted_split_exits_three(tmp_path, fde_dir, monkeypatch, capsys):
    real_sides = experiments.Experiment.sides

    def leaky(self, plan, scenario):
        sides, short = real_sides(self, plan, scenario)
        sides["train"] = sides["train"] + sides["test"][:1]
        return sides, short

    monkeypatch.setattr(experiments.Experiment, "sides", leaky)
    argv = ["experiment", "--scenario", "TRTR", "--dataset", str(fde_dir), "--time-steps", "16",
            "--max-epochs", "1", "--out", str(tmp_path / "o")]
    assert cli.main(argv) == 3
    assert "leakage" in capsys.readouterr().err
