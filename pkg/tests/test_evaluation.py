import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boneaxisreg.evaluation import (
    COLUMNS,
    TrialRecord,
    compute_tre,
    format_table,
    parse_table,
    save_summary,
    success,
    summarize,
)
from boneaxisreg.geometry import PivotMismatchError, Pose6DoF
from boneaxisreg.volume import BoneMask3D, EmptySegmentationError

params = st.lists(st.floats(-20, 20, allow_nan=False), min_size=6, max_size=6)


def ring(radius=100.0, n=360):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([radius * np.cos(t), radius * np.sin(t), np.zeros(n)], axis=1)


def test_identical_poses_zero(phantom):
    _, masks, _ = phantom
    p = Pose6DoF(1, 2, 3, 4, 5, 6, pivot=tuple(masks["femur"].centroid()))
    assert compute_tre(p, p, masks["femur"]) == 0.0


def test_pure_translation_exact(phantom):
    _, masks, _ = phantom
    gt = Pose6DoF.identity()
    assert compute_tre(gt, Pose6DoF(1.0, 0, 0), masks["patella"]) == 1.0


def test_rotation_chord():
    tre = compute_tre(Pose6DoF.identity(), Pose6DoF(0, 0, 0, 0, 0, 1.0), ring())
    assert abs(tre - 200 * np.sin(np.radians(0.5))) < 1e-3


def test_errors():
    with pytest.raises(PivotMismatchError):
        compute_tre(Pose6DoF.identity(), Pose6DoF.identity((1.0, 0, 0)), ring())
    with pytest.raises(EmptySegmentationError):
        compute_tre(Pose6DoF.identity(), Pose6DoF.identity(), BoneMask3D(np.zeros((2, 2, 2), bool)))


@settings(max_examples=100)
@given(params, params, st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_tre_symmetric_and_translation_exact(a, b, delta):
    pts = ring(30.0, 50)
    pa, pb = Pose6DoF.from_vector(a), Pose6DoF.from_vector(b)
    assert abs(compute_tre(pa, pb, pts) - compute_tre(pb, pa, pts)) < 1e-9
    moved = pa.with_params(np.r_[pa.translation + delta, pa.angles])
    assert abs(compute_tre(pa, moved, pts) - np.linalg.norm(delta)) < 1e-9


@pytest.mark.parametrize("tre,thr,ok", [(1.4, 1.5, True), (1.5, 1.5, True), (1.6, 1.5, False), (2.9, 3.0, True)])
def test_success(tre, thr, ok):
    assert success(tre, thr) is ok


def test_success_needs_positive_threshold():
    with pytest.raises(ValueError):
        success(0.1, 0.0)


def record(tre, errs, threshold=1.5):
    return TrialRecord(Pose6DoF.identity(), Pose6DoF.identity(), "femur", tre, tuple(errs), threshold,
                       success(tre, threshold))


def test_single_perfect_trial():
    s = summarize([record(0.0, [0] * 6)])
    assert s.row() == [0.0] * 7 + [100.0] and s.m_trans == 0 and s.m_rot == 0 and s.count == 1


def test_two_trials_arithmetic():
    s = summarize([record(1.0, [0] * 6), record(2.0, [0] * 6)])
    assert s.rsr == 50.0 and s.tre == 1.5


def test_hand_built_three_trials():
    errs = [[0.1, 0.2, 0.3, 1.0, 2.0, 3.0], [0.4, 0.0, 0.2, 0.5, 0.5, 0.5], [0.1, 0.1, 0.1, 0.0, 1.0, 2.0]]
    s = summarize([record(t, e) for t, e in zip([0.5, 1.7, 1.2], errs)])
    assert s.tx == pytest.approx(0.2, abs=1e-15)
    assert s.ty == pytest.approx(0.1, abs=1e-15)
    assert s.tz == pytest.approx(0.2, abs=1e-15)
    assert s.r_alpha == pytest.approx(0.5, abs=1e-15)
    assert s.r_beta == pytest.approx(3.5 / 3, abs=1e-15)
    assert s.r_gamma == pytest.approx(5.5 / 3, abs=1e-15)
    assert s.tre == pytest.approx(3.4 / 3, abs=1e-15)
    assert s.rsr == pytest.approx(200 / 3)
    assert abs(s.m_trans - (s.tx + s.ty + s.tz) / 3) < 1e-12
    assert abs(s.m_rot - (s.r_alpha + s.r_beta + s.r_gamma) / 3) < 1e-12
    assert s.median_tre == 1.2


def test_failed_trials_count_against_rsr():
    s = summarize([record(0.5, [0] * 6)], failed=1)
    assert s.rsr == 50.0 and s.count == 2


@settings(max_examples=100)
@given(st.lists(st.floats(0, 5), min_size=1, max_size=20), st.floats(0.1, 3), st.floats(0.1, 3))
def test_rsr_monotone_in_threshold(tres, t1, t2):
    lo, hi = sorted((t1, t2))
    trials = [record(t, [t] * 6) for t in tres]
    a, b = summarize(trials, lo), summarize(trials, hi)
    assert 0 <= a.rsr <= b.rsr <= 100


def test_empty_summary():
    with pytest.raises(ValueError):
        summarize([])


def test_score_record(phantom):
    _, masks, _ = phantom
    m = masks["femur"]
    gt = Pose6DoF.identity(tuple(m.centroid()))
    est = gt.with_params([0.5, 0, 0, 0, 0, -2.0])
    r = TrialRecord.score(gt, est, m, 1.5)
    assert r.bone == "femur" and r.success
    assert r.axis_errors == (0.5, 0.0, 0.0, 0.0, 0.0, 2.0)
    assert json.loads(json.dumps(r.to_dict()))["tre_mm"] == r.tre


def test_table_round_trip(tmp_path):
    errs = [[0.1, 0.2, 0.3, 1.0, 2.0, 3.0], [0.4, 0.0, 0.2, 0.5, 0.5, 0.5]]
    s = summarize([record(t, e) for t, e in zip([0.5, 1.7], errs)])
    save_summary(s, tmp_path / "s.json", tmp_path / "s.txt", label="BoneAxis-Reg + KPM")
    table = (tmp_path / "s.txt").read_text()
    assert table.splitlines()[0].split()[1:] == list(COLUMNS)
    parsed = parse_table(table)["BoneAxis-Reg + KPM"]
    stored = json.loads((tmp_path / "s.json").read_text())
    expect = [stored[k] for k in ("tx", "ty", "tz", "r_alpha", "r_beta", "r_gamma", "tre", "rsr")]
    assert max(abs(a - b) for a, b in zip(parsed, expect)) <= 1e-12


def test_multi_row_table():
    a = summarize([record(0.5, [0.1] * 6)])
    b = summarize([record(2.5, [1.0] * 6)])
    parsed = parse_table(format_table({"one": a, "two rows": b}))
    assert parsed["one"] == a.row() and parsed["two rows"] == b.row()
