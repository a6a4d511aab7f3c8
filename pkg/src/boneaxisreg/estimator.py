"""Estimator wrapper in the scikit-learn style."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .evaluation import TrialRecord
from .registration import RegistrationConfig, build_models, register_frame, track_sequence
from .simulate import flexion_axis as landmark_flexion_axis
from .validation import check_frame_masks, check_frames, check_geometry, check_masks, check_volume


class BoneAxisRegistration(BaseEstimator):
    """Per-bone 2D-3D registration of a static volume to projection frames.

    ``fit`` takes the volume and its bone masks; ``predict`` takes a list of
    frames (with optional per-frame 2-D bone masks) and returns, per frame,
    a bone-name -> pose dict. Frames are tracked in order, so later frames
    use the kinematic prior unless ``use_kpm`` is false.
    """

    def __init__(self, geometry=None, config=None, landmarks=None, flexion_axis=None, use_kpm=True,
                 seed=0, threads=1):
        self.geometry = geometry
        self.config = config
        self.landmarks = landmarks
        self.flexion_axis = flexion_axis
        self.use_kpm = use_kpm
        self.seed = seed
        self.threads = threads

    def _resolved_config(self) -> RegistrationConfig:
        cfg = self.config
        if cfg is None:
            cfg = RegistrationConfig()
        elif isinstance(cfg, dict):
            cfg = RegistrationConfig.from_dict(cfg)
        kpm = replace(cfg.kpm, enabled=bool(self.use_kpm) and cfg.kpm.enabled)
        return replace(cfg, kpm=kpm, seed=int(self.seed), workers=max(1, int(self.threads)))

    def fit(self, volume, masks):
        self.volume_ = check_volume(volume)
        self.masks_ = check_masks(masks, self.volume_)
        self.geometry_ = check_geometry(self.geometry)
        self.config_ = self._resolved_config()
        if self.flexion_axis is not None:
            axis = np.asarray(self.flexion_axis, float)
            self.flexion_axis_ = axis / np.linalg.norm(axis)
        elif self.landmarks is not None:
            self.flexion_axis_ = landmark_flexion_axis(self.landmarks)
        else:
            self.flexion_axis_ = np.array([1.0, 0.0, 0.0])
        self.models_ = build_models(self.volume_, self.masks_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "models_"):
            raise NotFittedError("call fit before predict")

    def register(self, frame, fixed_masks=None, frame_index=0):
        """Register a single frame without a prior; returns a RegistrationResult."""
        self._check_fitted()
        (frame,) = check_frames([frame], self.geometry_)
        return register_frame(frame, self.volume_, self.masks_, self.geometry_, None, self.config_,
                              fixed_masks, frame=frame_index, models=self.models_)

    def track(self, frames, fixed_masks=None):
        self._check_fitted()
        frames = check_frames(frames, self.geometry_)
        fixed_masks = check_frame_masks(fixed_masks, frames, self.masks_)
        self.sequence_ = track_sequence(frames, self.volume_, self.masks_, self.geometry_, self.config_,
                                        fixed_masks, self.flexion_axis_, self.models_)
        return self.sequence_

    def predict(self, frames, fixed_masks=None) -> list:
        seq = self.track(frames, fixed_masks)
        return [{k: b.pose for k, b in fr.bones.items()} for fr in seq.frames]

    def score(self, frames, truth, fixed_masks=None, threshold: float = 1.5) -> float:
        """Registration success rate (0..1) against ground-truth poses."""
        est = self.predict(frames, fixed_masks)
        ok = [TrialRecord.score(gt[b], e[b], self.masks_[b], threshold, bone=b).success if e[b] is not None
              else False for e, gt in zip(est, truth) for b in e]
        return float(np.mean(ok))
