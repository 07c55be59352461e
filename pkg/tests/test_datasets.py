import copy
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from imuaug import rotation as rot
from imuaug.datasets import (
    Repetition, SplitPlan, build_input_matrix, build_inputs, builtin_corpus_spec, check_loso, corpus_counts,
    load_dataset, loso_split, oversample, read_inertial_csv, save_dataset, stratified_kfold, synthesize_corpus,
    write_inertial_csv,
)
from imuaug.errors import ConfigurationError, DataValidationError, InvalidArgument
from imuaug.labeling import evaluate_labeler
from imuaug.skeleton import Pose, PoseSequence, builtin_model, export_consistent_orientations, extract_metrics, run_ik


def random_rep(i, segs=("pelvis", "femur_r", "tibia_r"), n=12, label=None, subject=None):
    rng = np.random.default_rng(i)
    trajs = {s: rot.OrientationTrajectory(s, 60.0, Rotation.random(n, random_state=rng.integers(2**31))
                                          .as_quat(scalar_first=True)) for s in segs}
    return Repetition(f"r{i:03d}", subject or f"s{i % 3}", "ex", label or 1 + i % 3, trajs)


def grid(n_subjects=5, n_classes=3, per=5):
    out = []
    k = 0
    for s in range(n_subjects):
        for c in range(1, n_classes + 1):
            for _ in range(per):
                out.append(random_rep(k, segs=("pelvis",), n=3, label=c, subject=f"s{s}"))
                k += 1
    return out


# -- files ------------------------------------------------------------------------


def test_save_load_round_trip_is_bit_exact(tmp_path):
    reps = [random_rep(i) for i in range(10)]
    save_dataset(reps, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert [r.repetition_id for r in back] == [r.repetition_id for r in reps]
    for a, b in zip(reps, back):
        assert (a.label, a.subject_id, a.source) == (b.label, b.subject_id, b.source)
        for s in a.segment_ids:
            assert np.array_equal(a.trajectories[s].samples, b.trajectories[s].samples)


def test_missing_file_is_named(tmp_path):
    save_dataset([random_rep(0)], tmp_path / "ds")
    (tmp_path / "ds" / "reps" / "r000.csv").unlink()
    with pytest.raises(DataValidationError, match="r000.csv"):
        load_dataset(tmp_path / "ds")


def test_zero_quaternion_row_reports_row(tmp_path):
    save_dataset([random_rep(0)], tmp_path / "ds")
    path = tmp_path / "ds" / "reps" / "r000.csv"
    lines = path.read_text().splitlines()
    cells = lines[4].split(",")
    cells[5:9] = ["0", "0", "0", "0"]
    lines[4] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataValidationError, match="row 3"):
        load_dataset(tmp_path / "ds")


def test_schema_mismatch(tmp_path):
    save_dataset([random_rep(0)], tmp_path / "ds")
    man = tmp_path / "ds" / "manifest.json"
    doc = json.loads(man.read_text())
    doc["schema_version"] = 99
    man.write_text(json.dumps(doc))
    with pytest.raises(DataValidationError, match="schema_version"):
        load_dataset(tmp_path / "ds")


def test_inertial_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    gyro, accel = rng.normal(size=(20, 2, 3)), rng.normal(size=(20, 2, 3))
    write_inertial_csv(tmp_path / "a.csv", ["pelvis", "femur_r"], gyro, accel)
    g, a = read_inertial_csv(tmp_path / "a.csv", ["pelvis", "femur_r"])
    assert np.array_equal(g, gyro) and np.array_equal(a, accel)
    with pytest.raises(DataValidationError):
        read_inertial_csv(tmp_path / "a.csv", ["femur_r", "pelvis"])


def test_repetition_validation():
    t1 = rot.OrientationTrajectory("a", 60.0, np.tile(rot.IDENTITY, (4, 1)))
    t2 = rot.OrientationTrajectory("b", 60.0, np.tile(rot.IDENTITY, (5, 1)))
    with pytest.raises(InvalidArgument):
        Repetition("x", "s", "ex", 2, {"a": t1, "b": t2})
    with pytest.raises(InvalidArgument):
        Repetition("x", "s", "ex", 4, {"a": t1})


# -- splits -----------------------------------------------------------------------


def test_kfold_exact_divisibility():
    reps = grid()
    lookup = {r.repetition_id: r for r in reps}
    plans = stratified_kfold(reps, k=5, seed=0)
    for p in plans:
        groups = Counter((lookup[i].subject_id, lookup[i].label) for i in p.test)
        assert len(groups) == 15 and set(groups.values()) == {1}
        assert not p.flags


def test_kfold_partition_and_determinism():
    reps = grid(per=4) + [random_rep(500 + i, segs=("pelvis",), n=3, subject="s9", label=1) for i in range(2)]
    plans = stratified_kfold(reps, k=3, seed=4)
    tests = [set(p.test) for p in plans]
    assert set().union(*tests) == {r.repetition_id for r in reps}
    assert sum(len(t) for t in tests) == len(reps)
    for p in plans:
        assert set(p.train) | set(p.validation) | set(p.test) == {r.repetition_id for r in reps}
    assert plans == stratified_kfold(reps, k=3, seed=4)
    assert any("s9" in f for f in plans[0].flags)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 1000), st.integers(1, 7))
def test_kfold_group_proportions(k, seed, per):
    reps = grid(n_subjects=3, per=per)
    lookup = {r.repetition_id: r for r in reps}
    plans = stratified_kfold(reps, k=min(k, len(reps)), seed=seed)
    for p in plans:
        groups = Counter((lookup[i].subject_id, lookup[i].label) for i in p.test)
        for key in {(r.subject_id, r.label) for r in reps}:
            assert abs(groups.get(key, 0) - per / len(plans)) < 1 + 1e-9


def test_kfold_rejects_bad_k():
    reps = grid(n_subjects=1, per=1)
    with pytest.raises(InvalidArgument):
        stratified_kfold(reps, k=4)
    with pytest.raises(InvalidArgument):
        stratified_kfold(reps, k=1)


def test_loso_plans(fde_small):
    plans = loso_split(fde_small, seed=0)
    assert len(plans) == 7
    lookup = {r.repetition_id: r for r in fde_small}
    covered = set()
    for p in plans:
        assert {lookup[i].subject_id for i in p.test} == {p.held_out_subject}
        assert p.held_out_subject not in {lookup[i].subject_id for i in p.train + p.validation}
        check_loso(p, fde_small)
        covered |= set(p.test)
        assert {lookup[i].label for i in p.validation} == {1, 2, 3}
    assert covered == set(lookup)


def test_loso_errors(fde_small):
    with pytest.raises(InvalidArgument):
        loso_split([r for r in fde_small if r.subject_id == "s01"])
    p = loso_split(fde_small)[0]
    bad = SplitPlan("loso", 0, p.train + (p.test[0],), p.validation, p.test[1:], p.held_out_subject)
    with pytest.raises(InvalidArgument):
        check_loso(bad, fde_small)
    with pytest.raises(InvalidArgument):
        SplitPlan("kfold", 0, ("a",), ("a",), ())


# -- oversampling -----------------------------------------------------------------


def test_oversample_to_majority():
    reps = [random_rep(i, segs=("pelvis",), n=2, label=lab) for i, lab in
            enumerate([1] * 10 + [2] * 5 + [3] * 2)]
    out = oversample(reps, seed=0)
    assert Counter(r.label for r in out) == {1: 10, 2: 10, 3: 10}
    ids = {r.repetition_id for r in reps}
    assert all(r.repetition_id in ids for r in out)
    assert [r.repetition_id for r in oversample(reps, seed=0)] == [r.repetition_id for r in out]


def test_oversample_balanced_is_noop():
    reps = grid(n_subjects=1, per=2)
    assert oversample(reps, seed=1) == reps


def test_oversample_empty_class():
    with pytest.raises(InvalidArgument):
        oversample([random_rep(0, label=1), random_rep(1, label=2)])


# -- classifier inputs ------------------------------------------------------------


def test_input_shapes(fde_small):
    m, lab = build_input_matrix(fde_small[0])
    assert m.shape == (36, 256) and lab == fde_small[0].label
    assert np.all(np.abs(m) <= 1.0)
    full = builtin_model("fullbody15")
    trajs = export_consistent_orientations(full, PoseSequence.constant(Pose.neutral(full), 5))
    m2, _ = build_input_matrix(Repetition("z", "s", "ex", 3, trajs))
    assert m2.shape == (60, 256)
    assert np.array_equal(m2[0::4], np.ones((15, 256)))
    assert np.array_equal(m2[1::4], np.zeros((15, 256)))


def test_input_rows_follow_segment_order(fde_small):
    r = fde_small[3]
    x, y = build_inputs([r], time_steps=16, segment_order=["tibia_r", "pelvis"])
    q = rot.resample_trajectory(r.trajectories["pelvis"], 16).samples
    assert np.array_equal(x[0, 4:8], q.T)
    assert x.shape == (1, 8, 16) and y[0] == r.label
    again, _ = build_inputs([r], time_steps=16, segment_order=["tibia_r", "pelvis"])
    assert np.array_equal(x, again)


# -- synthetic corpus -------------------------------------------------------------


def test_corpus_counts_fde_shape():
    counts = corpus_counts(builtin_corpus_spec("fde"), 210)
    assert len(counts) == 7
    assert all(c == {1: 10, 2: 10, 3: 10} for c in counts.values())


def test_corpus_is_self_consistent(lower, fde_rules, fde_small):
    pairs = [(extract_metrics(lower, run_ik(lower, r.trajectories).poses), r.label) for r in fde_small]
    assert evaluate_labeler(fde_rules, pairs).gm_f1 == 1.0


def test_corpus_is_deterministic(lower, fde_rules):
    a = synthesize_corpus(lower, fde_rules, "fde", n=9, seed=3)
    b = synthesize_corpus(lower, fde_rules, "fde", n=9, seed=3)
    for x, y in zip(a, b):
        assert x.repetition_id == y.repetition_id
        assert np.array_equal(x.samples(), y.samples())


def test_subject_offsets_show_in_first_frames(lower, fde_rules):
    spec = copy.deepcopy(builtin_corpus_spec("fde"))
    spec.update(subjects=["s01", "s02"], subject_offset_std=0.0, subject_tilt_std=0.0,
                subject_offsets={"s01": {"lumbar_rotation": 0.0}, "s02": {"lumbar_rotation": 0.2}})
    reps = synthesize_corpus(lower, fde_rules, spec, n=30, seed=0)

    def mean_yaw(s):
        return np.mean([rot.quat_to_euler(r.trajectories["torso"].samples[0])[2] for r in reps if r.subject_id == s])

    assert abs((mean_yaw("s02") - mean_yaw("s01")) - 0.2) < 0.01


def test_unreachable_archetype_fails(lower, fde_rules):
    spec = copy.deepcopy(builtin_corpus_spec("fde"))
    spec["archetypes"]["3"] = spec["archetypes"]["1"]
    with pytest.raises(ConfigurationError, match="class 3"):
        synthesize_corpus(lower, fde_rules, spec, n=21, seed=0)
