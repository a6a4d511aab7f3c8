"""Synthetic fluoroscopy: flexion trajectories and composite frames."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose6DoF, rotation_from_vector, rotation_to_euler
from .projector import (
    Image2D,
    ProjectionGeometry,
    add_poisson_noise,
    prepare_volume,
    render_mask_projection,
    render_prepared,
)
from .volume import Volume

FLEXING_BONES = ("femur", "patella")


def flexion_axis(landmarks: dict) -> np.ndarray:
    """Unit medial-lateral axis through the plateau, pointing lateral to medial."""
    a = np.asarray(landmarks["plateau_medial"], float) - np.asarray(landmarks["plateau_lateral"], float)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError("plateau medial and lateral landmarks coincide")
    return a / n


def rotation_about(center, axis, angle_deg: float, pivot) -> Pose6DoF:
    """Pose (about ``pivot``) that rotates space by ``angle_deg`` about a line."""
    R = rotation_from_vector(np.radians(angle_deg) * np.asarray(axis, float))
    c = np.asarray(center, float)
    p = np.asarray(pivot, float)
    # x' = R(x - c) + c = R(x - p) + p + (R - I)(p - c)
    t = (R - np.eye(3)) @ (p - c)
    return Pose6DoF.from_vector(np.concatenate([t, rotation_to_euler(R)]), pivot=tuple(p))


@dataclass(frozen=True)
class TrajectoryConfig:
    n_frames: int = 10
    max_flexion_deg: float = 60.0
    jitter_translation_mm: float = 0.0
    jitter_rotation_deg: float = 0.0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("need at least one frame")


def flexion_trajectory(masks: dict, landmarks: dict, cfg: TrajectoryConfig | None = None, seed=0) -> list:
    """Ground-truth poses per frame: femur and patella flex about the plateau axis.

    Flexion grows linearly from 0 to ``max_flexion_deg`` through the flexion
    centre; the tibia stays at neutral. Optional jitter adds independent
    uniform noise to every pose parameter.
    """
    cfg = cfg or TrajectoryConfig()
    axis = flexion_axis(landmarks)
    center = landmarks["flexion_center"]
    pivots = {k: tuple(m.centroid()) for k, m in masks.items()}
    rng = np.random.default_rng(seed)
    out = []
    for k in range(cfg.n_frames):
        theta = cfg.max_flexion_deg * k / max(cfg.n_frames - 1, 1)
        frame = {}
        for name in masks:
            if name in FLEXING_BONES:
                pose = rotation_about(center, axis, theta, pivots[name])
            else:
                pose = Pose6DoF.identity(pivots[name])
            if cfg.jitter_translation_mm or cfg.jitter_rotation_deg:
                j = np.r_[np.full(3, cfg.jitter_translation_mm), np.full(3, cfg.jitter_rotation_deg)]
                pose = pose.with_params(pose.as_vector() + rng.uniform(-j, j))
            frame[name] = pose
        out.append(frame)
    return out


def soft_tissue_background(v: Volume, masks: dict, level: float | None = None) -> Volume:
    """The volume with every bone voxel replaced by a soft-tissue value.

    ``level`` defaults to the median of the positive non-bone voxels.
    """
    bone = np.zeros(v.dims, dtype=bool)
    for m in masks.values():
        bone |= m.data
    rest = v.data[~bone]
    rest = rest[rest > 0]
    if level is None:
        level = float(np.median(rest)) if rest.size else 0.0
    return Volume(np.where(bone, np.float32(level), v.data).astype(np.float32), v.spacing, v.origin)


class FrameRenderer:
    """Composite DRRs: each bone moved by its own pose, optionally over a static background."""

    def __init__(self, v: Volume, masks: dict, g: ProjectionGeometry, background: bool = False):
        self.geometry = g
        self.masks = dict(masks)
        self.bones = {k: prepare_volume(v, m) for k, m in self.masks.items()}
        self.background = None
        if background:
            self.background = render_prepared(prepare_volume(soft_tissue_background(v, self.masks)), None, g)[0]

    def render(self, poses: dict, photons: float | None = None, seed=None):
        """Return ``(image, bone_masks_2d)`` for one frame."""
        g = self.geometry
        img = np.zeros((g.nv, g.nu))
        if self.background is not None:
            img += self.background
        masks2d = {}
        for name, pv in self.bones.items():
            img += render_prepared(pv, poses[name], g)[0]
            masks2d[name] = render_mask_projection(self.masks[name], poses[name], g).mask
        union = np.logical_or.reduce(list(masks2d.values()))
        frame = Image2D(img, (g.pu, g.pv), union)
        if photons is not None:
            frame = add_poisson_noise(frame, photons, seed)
        return frame, masks2d


def simulate_sequence(v: Volume, masks: dict, landmarks: dict, g: ProjectionGeometry,
                      cfg: TrajectoryConfig | None = None, photons: float | None = None, seed=0,
                      background: bool = False):
    """Render a flexion sequence. Returns ``(frames, bone_masks_2d, poses)``."""
    poses = flexion_trajectory(masks, landmarks, cfg, seed=seed)
    r = FrameRenderer(v, masks, g, background)
    noise = np.random.SeedSequence(seed).spawn(len(poses))
    frames, fmasks = [], []
    for k, p in enumerate(poses):
        img, m2 = r.render(p, photons, noise[k])
        frames.append(img)
        fmasks.append(m2)
    return frames, fmasks, poses


def random_pose(pivot, rng, translation_mm=10.0, rotation_deg=10.0) -> Pose6DoF:
    """Pose with every parameter uniform in the given symmetric ranges."""
    hw = np.r_[np.full(3, translation_mm), np.full(3, rotation_deg)]
    return Pose6DoF.from_vector(rng.uniform(-hw, hw), pivot=tuple(pivot))


def neutral_poses(masks: dict) -> dict:
    return {k: Pose6DoF.identity(tuple(m.centroid())) for k, m in masks.items()}

