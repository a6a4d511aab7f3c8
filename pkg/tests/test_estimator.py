import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from boneaxisreg.estimator import BoneAxisRegistration
from boneaxisreg.registration import DEOptions, LevelOptions, RegistrationConfig
from boneaxisreg.simulate import TrajectoryConfig, simulate_sequence

QUICK = RegistrationConfig(
    de=DEOptions(pop=8, max_gen=3),
    levels=(LevelOptions(4, max_rounds=1, max_fev=60), LevelOptions(1, max_rounds=1, max_fev=60)),
    tilt_check=False,
)


@pytest.fixture(scope="module")
def sequence(phantom, lateral):
    v, masks, lm = phantom
    return simulate_sequence(v, masks, lm, lateral, TrajectoryConfig(n_frames=2, max_flexion_deg=5))


def test_params_and_clone():
    est = BoneAxisRegistration(config=QUICK, seed=3, use_kpm=False)
    assert est.get_params()["seed"] == 3
    assert clone(est).get_params()["use_kpm"] is False


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        BoneAxisRegistration().predict([np.zeros((256, 256))])


def test_fit_predict(phantom, sequence):
    v, masks, lm = phantom
    frames, fmasks, truth = sequence
    est = BoneAxisRegistration(config=QUICK, landmarks=lm).fit(v, masks)
    np.testing.assert_allclose(est.flexion_axis_, [-1, 0, 0])
    poses = est.predict(frames, fmasks)
    assert len(poses) == 2 and set(poses[0]) == set(masks)
    assert [b.route for b in est.sequence_.frames[1].bones.values()] == ["kpm"] * 3
    again = BoneAxisRegistration(config=QUICK, landmarks=lm).fit(v, masks).predict(frames, fmasks)
    assert poses == again
    score = est.score(frames, truth, fmasks)
    assert 0.0 <= score <= 1.0


def test_no_kpm_and_dict_config(phantom, sequence):
    v, masks, _ = phantom
    frames, fmasks, _ = sequence
    est = BoneAxisRegistration(config=QUICK.to_dict(), use_kpm=False).fit(v, masks)
    assert est.config_.kpm.enabled is False
    est.track(frames, fmasks)
    assert {b.route for fr in est.sequence_.frames for b in fr.bones.values()} == {"de"}


def test_input_validation(phantom, sequence):
    v, masks, _ = phantom
    frames, fmasks, _ = sequence
    est = BoneAxisRegistration(config=QUICK).fit(v, masks)
    with pytest.raises(ValueError):
        est.predict([np.zeros((10, 10))])
    with pytest.raises(ValueError):
        est.predict(frames, fmasks[:1])
    with pytest.raises(ValueError):
        BoneAxisRegistration().fit(v, {})
