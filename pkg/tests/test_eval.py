import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occluforge.eval import OracleSolver, evaluate, evaluate_result, jpe, joe
from occluforge.geometry import Rotation
from occluforge.solver.pipeline import SolveResult
from occluforge.toy import generate_toy_dataset


def _rots(rng, n, j):
    return np.stack([[Rotation.random(rng).matrix for _ in range(j)] for _ in range(n)])


def test_jpe_single_joint_one_centimetre():
    gt = np.zeros((1, 24, 3))
    pred = gt.copy()
    pred[0, 5, 0] = 0.01
    assert jpe(pred, gt) == pytest.approx(1 / 24, abs=1e-12)


def test_jpe_uniform_offset():
    gt = np.random.default_rng(0).normal(size=(6, 5, 3))
    assert jpe(gt + np.array([0.03, 0.04, 0.0]), gt) == pytest.approx(5.0, abs=1e-12)


def test_joe_quarter_turn_on_one_of_two_joints():
    gt = np.broadcast_to(np.eye(3), (1, 2, 3, 3)).copy()
    pred = gt.copy()
    pred[0, 0] = Rotation.from_axis_angle([0, 0, 1], np.pi / 2).matrix
    assert joe(pred, gt) == pytest.approx(45.0, abs=1e-9)
    assert joe(gt, gt) == 0.0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        jpe(np.zeros((1, 3, 3)), np.zeros((1, 4, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_metric_invariances(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(2, 4, 5, 3))
    perm = rng.permutation(5)
    assert jpe(pred[:, perm], gt[:, perm]) == pytest.approx(jpe(pred, gt), rel=1e-12)
    shift = rng.normal(size=3) * 10
    assert jpe(pred + shift, gt + shift) == pytest.approx(jpe(pred, gt), rel=1e-9)
    rp, rg = _rots(rng, 4, 5), _rots(rng, 4, 5)
    assert joe(rp[:, perm], rg[:, perm]) == pytest.approx(joe(rp, rg), rel=1e-12)
    g = Rotation.random(rng).matrix
    assert joe(g @ rp, g @ rg) == pytest.approx(joe(rp, rg), abs=1e-6)


@pytest.fixture(scope="module")
def dataset():
    return generate_toy_dataset(n_frames=400, n_sequences=4)


def test_oracle_scores_zero_in_every_bucket(dataset):
    b = dataset.batch()
    report = evaluate(OracleSolver(b), b)
    assert not report.self_check()
    for m in [*report.buckets.values(), report.overall]:
        if m.solved:
            assert m.jpe_cm == 0.0 and m.joe_deg == 0.0
    assert report.overall.frames == 400 and report.overall.failures == 0


def test_failures_are_counted_and_excluded(dataset):
    b = dataset.batch()
    rng = np.random.default_rng(0)
    joints = b.joints + rng.normal(scale=0.01, size=b.joints.shape)
    failed = np.zeros(len(b), bool)
    failed[::7] = True
    joints[failed] = np.nan
    rots = b.rotations.copy()
    rots[failed] = np.nan
    report = evaluate_result(SolveResult(b.clean, joints, rots, failed), b)
    assert report.overall.failures == failed.sum()
    assert report.overall.solved == len(b) - failed.sum()
    assert np.isfinite(report.overall.jpe_cm)
    ok = ~failed
    assert report.overall.jpe_cm == pytest.approx(jpe(joints[ok], b.joints[ok]), rel=1e-12)
    assert not report.self_check()


def test_bucket_merge_equals_overall(dataset):
    b = dataset.batch()
    rng = np.random.default_rng(1)
    res = SolveResult(b.clean, b.joints + rng.normal(scale=0.02, size=b.joints.shape),
                      b.rotations, np.zeros(len(b), bool))
    report = evaluate_result(res, b, buckets=(0.05, 0.3, 0.5, 0.9))
    assert sum(m.frames for m in report.buckets.values()) == 400
    assert not report.self_check()
    assert list(report.buckets) == ["5%", "30%", "50%", "90%"]


def test_report_files(dataset, tmp_path):
    b = dataset.batch()
    report = evaluate(OracleSolver(b), b)
    report.save_csv(tmp_path / "r.csv")
    report.save_joint_csv(tmp_path / "j.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "bucket,frames,solved,failures,JPE_cm,JOE_deg"
    assert lines[-1].startswith("overall,400,400,0,")
    assert len((tmp_path / "j.csv").read_text().splitlines()) == 6
    assert "overall" in report.table()


def test_broken_report_is_caught():
    from occluforge.eval import BucketMetrics, EvalReport

    m = BucketMetrics(10, 9, 0, 1.0, 1.0)
    r = EvalReport({"20%": m}, BucketMetrics(10, 9, 0, 2.0, 1.0), np.zeros(2), np.zeros(2))
    problems = r.self_check()
    assert any("solved + failures" in p for p in problems)
    assert any("jpe_cm" in p for p in problems)
