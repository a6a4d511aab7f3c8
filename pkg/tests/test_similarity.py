import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from boneaxisreg.geometry import Pose6DoF
from boneaxisreg.projector import Image2D, render_drr, render_mask_projection
from boneaxisreg.similarity import (
    WORST_COST,
    BoneObjective,
    UndefinedNCCError,
    dilate_region,
    ncc,
    objective,
)
from boneaxisreg.volume import Volume

images = arrays(np.float64, (6, 7), elements=st.floats(-100, 100, allow_nan=False))


def non_constant(x):
    return np.ptp(x) > 1e-3


def two_pass(a, b):
    a, b = a.ravel(), b.ravel()
    ma = sum(a) / len(a)
    mb = sum(b) / len(b)
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = sum((x - ma) ** 2 for x in a) ** 0.5
    db = sum((y - mb) ** 2 for y in b) ** 0.5
    return num / (da * db)


def test_basic_identities(rng):
    x = rng.random((8, 8))
    assert ncc(x, x).value == pytest.approx(1.0, abs=1e-12)
    assert ncc(x, -x).value == pytest.approx(-1.0, abs=1e-12)
    assert ncc(x, 3.5 * x - 2.0).value == pytest.approx(1.0, abs=1e-12)
    assert ncc(x, x).count == 64


def test_matches_naive_oracle(rng):
    for _ in range(10):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        assert abs(ncc(a, b).value - two_pass(a, b)) < 1e-12


def test_region_restricts_pixels(rng):
    a, b = rng.random((8, 8)), rng.random((8, 8))
    region = np.zeros((8, 8), bool)
    region[2:5, 1:6] = True
    s = ncc(a, b, region)
    assert s.count == 15
    assert abs(s.value - two_pass(a[region], b[region])) < 1e-12


def test_errors(rng):
    with pytest.raises(ValueError):
        ncc(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(UndefinedNCCError):
        ncc(np.ones((3, 3)), rng.random((3, 3)))
    one = np.zeros((3, 3), bool)
    one[0, 0] = True
    with pytest.raises(ValueError):
        ncc(rng.random((3, 3)), rng.random((3, 3)), one)


@settings(max_examples=200)
@given(images, images)
def test_symmetric_and_bounded(a, b):
    assume(non_constant(a) and non_constant(b))
    ab, ba = ncc(a, b).value, ncc(b, a).value
    assert abs(ab - ba) < 1e-12
    assert abs(ab) <= 1 + 1e-12


@settings(max_examples=200)
@given(images, images, st.floats(0.01, 100), st.floats(-100, 100))
def test_affine_invariance(a, b, alpha, beta):
    assume(non_constant(a) and non_constant(b))
    assert abs(ncc(a, alpha * b + beta).value - ncc(a, b).value) < 1e-9
    assert abs(ncc(alpha * a + beta, b).value - ncc(a, b).value) < 1e-9


def test_dilation_grows_region():
    m = np.zeros((11, 11), bool)
    m[5, 5] = True
    d = dilate_region(m, 3)
    assert d.sum() == 29 and d[5, 2] and not d[2, 2]
    assert np.array_equal(dilate_region(m, 0), m)


@pytest.fixture(scope="module")
def femur_case(phantom, lateral):
    v, masks, _ = phantom
    m = masks["femur"]
    isolated = Volume(np.where(m.data, v.data, 0).astype(np.float32), v.spacing, v.origin)
    truth = Pose6DoF(2.0, -1.0, 3.0, 4.0, -2.0, 6.0, pivot=tuple(m.centroid()))
    fixed = render_drr(isolated, truth, lateral)
    fixed = fixed.with_mask(render_mask_projection(m, truth, lateral).mask)
    return v, m, truth, fixed


def test_self_match(femur_case, lateral):
    v, m, truth, fixed = femur_case
    assert objective(fixed, v, m, lateral, truth) <= 1e-6


def test_translation_sweep_monotone(femur_case, lateral):
    v, m, truth, fixed = femur_case
    obj = BoneObjective(fixed, v, m, lateral, pivot=truth.pivot)
    costs = []
    for d in (0.0, 2.0, 4.0, 8.0):
        p = truth.as_vector()
        p[1] += d
        costs.append(obj(p))
    assert all(c >= 0 for c in costs)
    assert costs == sorted(costs) and costs[0] < costs[1]
    assert obj.evaluations == 4


def test_objective_degenerate_cases(femur_case, lateral):
    v, m, truth, fixed = femur_case
    obj = BoneObjective(fixed, v, m, lateral, pivot=truth.pivot)
    assert obj([np.nan] * 6) == WORST_COST
    far = truth.as_vector()
    far[2] += 5000
    assert obj(far) == WORST_COST


def test_exclude_removes_pixels(femur_case, lateral):
    v, m, truth, fixed = femur_case
    full = BoneObjective(fixed, v, m, lateral, pivot=truth.pivot)
    cut = np.zeros_like(full.region)
    cut[:, :128] = True
    part = BoneObjective(fixed, v, m, lateral, pivot=truth.pivot, exclude=cut)
    assert part.region.sum() < full.region.sum()
    assert not np.any(part.region & cut)


def test_shape_mismatch(femur_case, lateral):
    v, m, truth, _ = femur_case
    with pytest.raises(ValueError):
        BoneObjective(Image2D(np.zeros((4, 4))), v, m, lateral)
