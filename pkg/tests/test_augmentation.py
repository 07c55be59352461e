import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imuaug import rotation as rot
from imuaug.augmentation import (
    AugmentationDistribution, AugmentationParams, AugmentationWarning, Rejection, SegmentStats, augment_trajectory,
    candidate_seed, distributions_from_dict, distributions_to_dict, estimate_distributions, generate_candidate,
    generate_set, load_distributions, offsets_and_ranges, sample_params, save_distributions,
)
from imuaug.datasets import Repetition
from imuaug.errors import ConfigurationError, InsufficientData
from imuaug.labeling import assign_label
from imuaug.skeleton import export_consistent_orientations, extract_metrics, run_ik

DEG = np.pi / 180


def euler_traj(e, seg="femur_r"):
    return rot.OrientationTrajectory(seg, 60.0, rot.euler_to_quat(np.asarray(e, dtype=float)))


def ramp(n, start, stop):
    return np.linspace(start, stop, n)


def rep(rid, label, trajs, subject="s1"):
    return Repetition(rid, subject, "ex", label, trajs)


def one_seg_rep(rid, label, roll_range, offset=(0.0, 0.0, 0.0)):
    n = 20
    e = np.tile(np.asarray(offset, dtype=float), (n, 1))
    e[:, 0] += ramp(n, 0.0, roll_range)
    e[:, 1] += 0.1 * np.sin(np.linspace(0, np.pi, n))
    return rep(rid, label, {"femur_r": euler_traj(e)})


# -- estimation -------------------------------------------------------------------


def test_identical_repetitions_have_zero_spread():
    a = one_seg_rep("a", 2, 0.4, (0.1, 0.0, 0.2))
    b = one_seg_rep("b", 2, 0.4, (0.1, 0.0, 0.2))
    st_ = estimate_distributions([a, b])[("ex", 2)].segments["femur_r"]
    off, rng_ = offsets_and_ranges(a.trajectories["femur_r"])
    assert np.array_equal(st_.offset_std, np.zeros(3))
    assert np.array_equal(st_.range_std, np.zeros(3))
    assert np.allclose(st_.offset_mean, off, atol=1e-15)
    assert np.allclose(st_.range_mean, rng_, atol=1e-15)


def test_population_statistics_of_ranges():
    reps = [one_seg_rep("a", 1, 20 * DEG), one_seg_rep("b", 1, 30 * DEG)]
    st_ = estimate_distributions(reps)[("ex", 1)].segments["femur_r"]
    assert abs(st_.range_mean[0] - 25 * DEG) < 1e-9
    assert abs(st_.range_std[0] - 5 * DEG) < 1e-9


def test_ranges_use_unwrapped_tracks():
    # yaw sweeps across +-pi; the wrapped track would report a range near 2 pi
    e = np.zeros((30, 3))
    e[:, 2] = ramp(30, 2.9, 3.5)
    _, rng_ = offsets_and_ranges(euler_traj(e))
    assert abs(rng_[2] - 0.6) < 1e-9


def test_single_repetition_group_is_insufficient():
    reps = [one_seg_rep("a", 1, 0.3), one_seg_rep("b", 1, 0.2), one_seg_rep("c", 3, 0.1)]
    with pytest.raises(InsufficientData) as exc:
        estimate_distributions(reps)
    assert "class=3" in str(exc.value)


def test_statistical_recovery_of_generating_distribution():
    rng = np.random.default_rng(99)
    n = 200
    off_mu, off_sd = np.array([0.2, -0.1, 0.3]), np.array([0.05, 0.03, 0.08])
    rg_mu, rg_sd = np.array([0.6, 0.3, 0.4]), np.array([0.1, 0.05, 0.06])
    reps, true_off, true_rng = [], [], []
    t = np.linspace(0, 1, 25)[:, None]
    for i in range(n):
        o = off_mu + off_sd * rng.standard_normal(3)
        r = rg_mu + rg_sd * rng.standard_normal(3)
        reps.append(rep(f"r{i}", 3, {"femur_r": euler_traj(o + r * t)}))
        true_off.append(o)
        true_rng.append(r)
    st_ = estimate_distributions(reps)[("ex", 3)].segments["femur_r"]
    true_off, true_rng = np.array(true_off), np.array(true_rng)
    # exact against the realized draws
    assert np.allclose(st_.offset_mean, true_off.mean(axis=0), atol=1e-9)
    assert np.allclose(st_.range_std, true_rng.std(axis=0), atol=1e-9)
    # within two standard errors of the generating parameters
    assert np.all(np.abs(st_.offset_mean - off_mu) <= 2 * off_sd / np.sqrt(n))
    assert np.all(np.abs(st_.range_mean - rg_mu) <= 2 * rg_sd / np.sqrt(n))


# -- sampling ---------------------------------------------------------------------


def _dist(off_mean, off_std, rg_mean, rg_std):
    return AugmentationDistribution("ex", 1, {"femur_r": SegmentStats(off_mean, off_std, rg_mean, rg_std)})


def test_zero_std_sampling_is_exact():
    d = _dist([0.1, 0.2, 0.3], [0, 0, 0], [0.4, 0.5, 0.6], [0, 0, 0])
    p = sample_params(d, np.random.default_rng(0))
    assert np.array_equal(p.beta["femur_r"], [0.1, 0.2, 0.3])
    assert np.array_equal(p.delta["femur_r"], [0.4, 0.5, 0.6])


def test_sampling_is_seeded():
    d = _dist([0.1, 0.2, 0.3], [0.1, 0.1, 0.1], [0.4, 0.5, 0.6], [0.1, 0.1, 0.1])
    a = sample_params(d, np.random.default_rng(5))
    b = sample_params(d, np.random.default_rng(5))
    assert np.array_equal(a.beta["femur_r"], b.beta["femur_r"])
    assert np.array_equal(a.delta["femur_r"], b.delta["femur_r"])


def test_monte_carlo_moments():
    mu_o, sd_o = np.array([0.5, -0.8, 1.2]), np.array([0.1, 0.2, 0.3])
    mu_r, sd_r = np.array([1.0, 2.0, 1.5]), np.array([0.05, 0.1, 0.2])
    d = _dist(mu_o, sd_o, mu_r, sd_r)
    rng = np.random.default_rng(2024)
    draws = [sample_params(d, rng) for _ in range(100_000)]
    beta = np.array([p.beta["femur_r"] for p in draws])
    delta = np.array([p.delta["femur_r"] for p in draws])
    assert np.all(delta >= 0)
    for x, mu, sd in ((beta, mu_o, sd_o), (delta, mu_r, sd_r)):
        assert np.all(np.abs(x.mean(axis=0) - mu) <= 0.01 * np.abs(mu))
        assert np.all(np.abs(x.std(axis=0) - sd) <= 0.01 * sd)


def test_negative_range_draws_are_clamped():
    d = _dist([0, 0, 0], [0, 0, 0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
    rng = np.random.default_rng(1)
    deltas = np.array([sample_params(d, rng).delta["femur_r"] for _ in range(200)])
    assert deltas.min() == 0.0
    assert (deltas == 0).mean() > 0.3


def test_segment_stats_validation():
    with pytest.raises(ConfigurationError):
        SegmentStats([0, 0, 0], [-1, 0, 0], [0, 0, 0], [0, 0, 0])
    with pytest.raises(ConfigurationError):
        SegmentStats([0, 0], [0, 0, 0], [0, 0, 0], [0, 0, 0])


# -- trajectory modification ------------------------------------------------------


def _wavy(n=40):
    t = np.linspace(0, 1, n)
    return np.column_stack([0.2 + 0.35 * np.sin(np.pi * t), -0.1 + 0.2 * t, 0.3 * np.sin(2 * np.pi * t)])


def test_identity_parameters_reproduce_input():
    tr = euler_traj(_wavy())
    beta, delta = offsets_and_ranges(tr)
    out = augment_trajectory(tr, (beta, delta))
    assert np.max(rot.angle_between(out.samples, tr.samples)) <= 1e-9


def test_alpha_one_point_five():
    e = np.zeros((21, 3))
    e[:, 0] = ramp(21, 0, 20 * DEG)
    e[:, 1] = 0.05 * np.sin(np.linspace(0, np.pi, 21))
    tr = euler_traj(e)
    _, rng_ = offsets_and_ranges(tr)
    delta = np.array([30 * DEG, rng_[1], 0.0])
    out, info = augment_trajectory(tr, (np.zeros(3), delta), return_info=True)
    assert abs(info.alpha[0] - 1.5) < 1e-9
    _, out_rng = offsets_and_ranges(out)
    assert abs(out_rng[0] - 30 * DEG) < 1e-9
    assert info.static_axes.tolist() == [False, False, True]
    assert info.alpha[2] == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3), st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3))
def test_first_frame_equals_beta(beta, delta):
    out = augment_trajectory(euler_traj(_wavy()), (np.array(beta), np.array(delta)))
    first = rot.quat_to_euler(out.samples[0])
    assert np.allclose(first, beta, atol=1e-9)


def test_static_trajectory_warns_and_offsets():
    tr = euler_traj(np.zeros((10, 3)))
    with pytest.warns(AugmentationWarning):
        out, info = augment_trajectory(tr, ([0.1, 0.2, 0.3], [0.5, 0.5, 0.5]), return_info=True)
    assert info.warning
    assert np.allclose(rot.quat_to_euler(out.samples), [0.1, 0.2, 0.3], atol=1e-12)


def test_missing_segment_params():
    with pytest.raises(ConfigurationError):
        augment_trajectory(euler_traj(_wavy(), "tibia_r"), AugmentationParams({}, {}))


# -- candidates -------------------------------------------------------------------


def _relabel(model, ruleset, r):
    ik = run_ik(model, r.trajectories)
    return assign_label(extract_metrics(model, ik.poses), ruleset)[0]


def test_zero_spread_distribution_reproduces_class(lower, fde_rules, fde_small):
    for src in (r for r in fde_small if r.subject_id == "s02"):
        dists = estimate_distributions([src], min_count=1)
        res = generate_candidate(src, src.label, dists, lower, fde_rules, seed=1)
        assert isinstance(res, Repetition), src.repetition_id
        assert res.label == src.label
        assert res.source == "augmented" and res.source_id == src.repetition_id
        assert _relabel(lower, fde_rules, res) == src.label


def test_exported_candidate_is_ik_consistent(lower, fde_rules, fde_small):
    src = fde_small[0]
    res = generate_candidate(src, src.label, estimate_distributions([src], min_count=1), lower, fde_rules, seed=3)
    ik = run_ik(lower, res.trajectories)
    again = export_consistent_orientations(lower, ik.poses)
    for s, tr in res.trajectories.items():
        assert np.max(rot.angle_between(tr.samples, again[s].samples)) <= 1e-6


def test_limit_violating_distribution_is_never_mislabeled(lower, fde_rules, fde_small):
    src = next(r for r in fde_small if r.label == 3)
    dists = estimate_distributions([src], min_count=1)
    segs = dict(dists[("fde", 3)].segments)
    st_ = segs["tibia_r"]
    # shank pitched far past the knee's extension stop
    segs["tibia_r"] = SegmentStats(st_.offset_mean + [2.5, 0, 0], st_.offset_std, st_.range_mean, st_.range_std)
    forced = {("fde", 3): AugmentationDistribution("fde", 3, segs, 1)}
    for seed in range(3):
        res = generate_candidate(src, 3, forced, lower, fde_rules, seed=seed)
        if isinstance(res, Rejection):
            assert res.assigned_label != 3
        else:
            assert res.label == 3 and _relabel(lower, fde_rules, res) == 3


def test_missing_distribution_group(lower, fde_rules, fde_small):
    src = fde_small[0]
    with pytest.raises(ConfigurationError):
        generate_candidate(src, 2, {}, lower, fde_rules, seed=0)


def test_candidate_seed_is_keyed():
    a = candidate_seed(0, "r1", 2, 0)
    assert a == candidate_seed(0, "r1", 2, 0)
    assert len({a, candidate_seed(1, "r1", 2, 0), candidate_seed(0, "r2", 2, 0),
                candidate_seed(0, "r1", 3, 0), candidate_seed(0, "r1", 2, 1)}) == 5
    assert 0 <= a < 2**64


@pytest.fixture(scope="module")
def small_set(lower, fde_rules, fde_small):
    sources = [r for r in fde_small if r.subject_id in ("s01", "s05")]
    dists = estimate_distributions(fde_small)
    out, report = generate_set(sources, 1, dists, lower, fde_rules, seed=11, max_attempts=20)
    return sources, dists, out, report


def test_generate_set_accepts_only_matching_labels(lower, fde_rules, small_set):
    sources, _, out, report = small_set
    assert out
    for r in out:
        assert r.label == r.provenance["intended_class"] == _relabel(lower, fde_rules, r)
    reached = {(p["source_id"], p["class"]) for p in report["pairs"] if p["accepted"]}
    assert len(reached) == len(out)
    assert report["accepted"] == len(out)
    assert len(report["pairs"]) == 3 * len(sources)


def test_generate_set_reports_shortfalls(small_set):
    _, _, out, report = small_set
    for c, v in report["per_class"].items():
        got = sum(1 for r in out if r.label == int(c))
        assert v["accepted"] == got
        assert v["shortfall"] == v["requested"] - got
    assert {tuple(u) for u in report["unreachable"]} == {
        (p["source_id"], p["class"]) for p in report["pairs"] if p["accepted"] == 0}


def test_generate_set_is_reproducible_across_workers(lower, fde_rules, small_set):
    sources, dists, out, report = small_set
    again, rep2 = generate_set(sources, 1, dists, lower, fde_rules, seed=11, max_attempts=20, jobs=2)
    assert rep2 == report
    assert [r.repetition_id for r in again] == [r.repetition_id for r in out]
    for a, b in zip(again, out):
        for s in a.trajectories:
            assert np.array_equal(a.trajectories[s].samples, b.trajectories[s].samples)


def test_distribution_file_round_trip(tmp_path, fde_small):
    dists = estimate_distributions(fde_small)
    save_distributions(dists, tmp_path / "d.json")
    back = load_distributions(tmp_path / "d.json")
    assert distributions_to_dict(back) == distributions_to_dict(dists)
    with pytest.raises(ConfigurationError):
        distributions_from_dict({"schema_version": 9, "distributions": []})


def test_augmentation_warning_is_silenced_inside_candidates(lower, fde_rules, fde_small):
    src = fde_small[0]
    with warnings.catch_warnings():
        warnings.simplefilter("error", AugmentationWarning)
        generate_candidate(src, src.label, estimate_distributions([src], min_count=1), lower, fde_rules, seed=0)
