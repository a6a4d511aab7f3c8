"""Per-bone 2D-3D registration: global initialization from the bone axis and
differential evolution, kinematic prediction between frames, and
coarse-to-fine Powell/Nelder-Mead refinement.
"""
from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import (
    Pose6DoF,
    euler_to_rotation,
    pose_to_matrix,
    rotation_from_vector,
    rotation_to_euler,
    rotation_vector,
)
from .optimize import BoxBounds, differential_evolution, hybrid_powell_nm
from .projector import Image2D, ProjectionGeometry, downsample_mask, prepare_volume
from .similarity import WORST_COST, BoneObjective
from .volume import BONE_LABELS, BoneMask3D, PrincipalAxis, Volume, mask_to_pointcloud, principal_axis

log = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    pass


class RefinementError(RuntimeError):
    pass


@dataclass(frozen=True)
class DEOptions:
    pop: int = 30
    F: float = 0.7
    CR: float = 0.9
    max_gen: int = 100
    ftol: float = 1e-12


@dataclass(frozen=True)
class LevelOptions:
    """Local-search settings for one pyramid level."""

    factor: int
    xtol: float = 1e-3
    ftol: float = 1e-5
    step: float = 1.0
    max_rounds: int = 3
    max_fev: int | None = None


@dataclass(frozen=True)
class KPMOptions:
    enabled: bool = True
    step_translation_mm: float = 5.0
    step_rotation_deg: float = 8.0
    window_translation_mm: float = 2.0
    window_rotation_deg: float = 3.0
    velocity_weight: float = 1.0


def _default_levels():
    return (
        LevelOptions(4, xtol=1e-2, ftol=1e-6, step=2.0, max_rounds=2),
        LevelOptions(1, xtol=1e-3, ftol=1e-8, step=0.5, max_rounds=3),
    )


@dataclass(frozen=True)
class RegistrationConfig:
    de: DEOptions = field(default_factory=DEOptions)
    levels: tuple = field(default_factory=_default_levels)
    de_factor: int = 4
    bound_translation_mm: float = 20.0
    bound_rotation_deg: float = 15.0
    kpm: KPMOptions = field(default_factory=KPMOptions)
    force_de: bool = False
    region_dilation_px: int = 3
    exclude_overlap: bool = True
    tilt_check: bool = True
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        factors = [lv.factor for lv in self.levels]
        if not factors or factors[-1] != 1 or any(a <= b for a, b in zip(factors, factors[1:])):
            raise ValueError(f"pyramid factors must be strictly descending and end at 1, got {factors}")
        if self.bound_translation_mm <= 0 or self.bound_rotation_deg <= 0:
            raise ValueError("search bounds must be positive")

    @property
    def pyramid(self) -> tuple:
        return tuple(lv.factor for lv in self.levels)

    def search_half_width(self) -> np.ndarray:
        t, r = self.bound_translation_mm, self.bound_rotation_deg
        return np.array([t, t, t, r, r, r])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = [asdict(lv) for lv in self.levels]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        d = dict(d)
        if "de" in d:
            d["de"] = DEOptions(**d["de"])
        if "kpm" in d:
            d["kpm"] = KPMOptions(**d["kpm"])
        if "levels" in d:
            d["levels"] = tuple(LevelOptions(**lv) for lv in d["levels"])
        return cls(**d)


@dataclass(frozen=True)
class KPMState:
    pose: Pose6DoF
    velocity: np.ndarray  # (dtx, dty, dtz) mm, then a rotation vector in degrees
    flexion_axis: np.ndarray

    def __post_init__(self):
        vel = np.asarray(self.velocity, dtype=float).reshape(6)
        axis = np.asarray(self.flexion_axis, dtype=float).reshape(3)
        if not np.all(np.isfinite(vel)):
            raise ValueError("KPM velocity must be finite")
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise ValueError("flexion axis must be non-zero")
        object.__setattr__(self, "velocity", vel)
        object.__setattr__(self, "flexion_axis", axis / norm)

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "velocity": [float(x) for x in self.velocity],
                "flexion_axis": [float(x) for x in self.flexion_axis]}


@dataclass
class BoneRegistration:
    """Outcome of registering one bone in one frame."""

    bone: str
    pose: Pose6DoF | None
    cost: float
    route: str
    evaluations: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    ok: bool = True
    error: str | None = None
    wall_time: float = 0.0

    def to_dict(self, timings=False) -> dict:
        d = {
            "bone": self.bone,
            "pose": None if self.pose is None else self.pose.to_dict(),
            "cost": float(self.cost),
            "route": self.route,
            "evaluations": dict(self.evaluations),
            "stages": list(self.stages),
            "ok": self.ok,
            "error": self.error,
        }
        if timings:
            d["wall_time_s"] = self.wall_time
        return d

    @property
    def total_evaluations(self) -> int:
        return int(sum(self.evaluations.values()))


@dataclass
class RegistrationResult:
    bones: dict
    frame: int = 0
    wall_time: float = 0.0

    @property
    def flagged(self) -> bool:
        return any(not b.ok for b in self.bones.values())

    @property
    def poses(self) -> dict:
        return {k: b.pose for k, b in self.bones.items()}

    @property
    def total_evaluations(self) -> int:
        return sum(b.total_evaluations for b in self.bones.values())

    def to_dict(self, timings=False) -> dict:
        d = {"frame": self.frame, "flagged": self.flagged,
             "bones": {k: b.to_dict(timings) for k, b in self.bones.items()}}
        if timings:
            d["wall_time_s"] = self.wall_time
        return d


@dataclass
class SequenceResult:
    frames: list
    kpm_states: list

    def to_dict(self, timings=False) -> dict:
        return {
            "frames": [f.to_dict(timings) for f in self.frames],
            "kpm_states": [{k: s.to_dict() for k, s in st.items()} for st in self.kpm_states],
        }


def bone_seed(seed: int, frame: int, bone: str) -> np.random.SeedSequence:
    """Per-bone, per-frame seed, independent of the order bones are processed in."""
    return np.random.SeedSequence([int(seed), int(frame), zlib.crc32(bone.encode())])


# -- global initialization ---------------------------------------------------------

def _mask_pca_2d(mask2d) -> tuple[np.ndarray, np.ndarray]:
    jj, ii = np.nonzero(mask2d)
    if ii.size < 3:
        raise InitializationError("fixed image bone mask is empty")
    pts = np.stack([ii, jj], axis=1).astype(float)
    c = pts.mean(axis=0)
    cov = np.cov(pts - c, rowvar=False, bias=True)
    w, V = np.linalg.eigh(cov)
    return c, V[:, int(np.argmax(w))]


def axis_seed(fixed: Image2D, g: ProjectionGeometry, axis: PrincipalAxis, pivot) -> np.ndarray:
    """Seed parameters aligning the projected bone axis with the fixed mask's 2-D axis.

    The rotation turns the volume about the beam direction through the pivot
    until its projected principal axis matches the principal axis of the fixed
    mask pixels. The translation moves the pivot onto the back-projection of
    the fixed mask centroid, in the plane through the pivot parallel to the
    detector.
    """
    if fixed.mask is None or not fixed.mask.any():
        raise InitializationError("fixed image has no bone mask")
    pivot = np.asarray(pivot, dtype=float)
    c2, f2 = _mask_pca_2d(fixed.mask)
    ends = g.project(np.stack([pivot, pivot + 20.0 * np.asarray(axis.direction)]))
    d2 = ends[1] - ends[0]
    if np.linalg.norm(d2) < 1e-9:
        theta = 0.0
    else:
        d2 = d2 / np.linalg.norm(d2)
        if f2 @ d2 < 0:
            f2 = -f2
        theta = math.atan2(d2[0] * f2[1] - d2[1] * f2[0], d2 @ f2)
    n = g.normal
    R = rotation_from_vector(theta * n)
    S, ray = g.pixel_ray(c2[0], c2[1])
    s = ((pivot - S) @ n) / (ray @ n)
    target = S + s * ray
    angles = rotation_to_euler(R)
    return np.concatenate([target - pivot, angles])


def initialize_global(fixed: Image2D, v: Volume, mask: BoneMask3D, g: ProjectionGeometry,
                      axis: PrincipalAxis | None = None, cfg: RegistrationConfig | None = None,
                      seed=None, pivot=None, prepared=None, exclude=None):
    """Differential evolution over a box centred on the axis-aligned seed.

    Runs at the ``cfg.de_factor`` pyramid level. ``exclude`` is a full
    resolution mask of pixels left out of the comparison region. Returns
    ``(T0, info)``.
    """
    cfg = cfg or RegistrationConfig()
    pivot = tuple(mask.centroid()) if pivot is None else tuple(pivot)
    if axis is None:
        axis = principal_axis(mask_to_pointcloud(mask, 20000))
    x_seed = axis_seed(fixed, g, axis, pivot)
    f = cfg.de_factor
    fixed_c, g_c = fixed.downsample(f), g.downsample(f)
    obj = BoneObjective(fixed_c, v, mask, g_c, pivot=pivot, prepared=prepared,
                        dilation=_level_dilation(cfg, f), exclude=_level_mask(exclude, f))
    bounds = BoxBounds.around(x_seed, cfg.search_half_width())
    de = cfg.de
    res = differential_evolution(obj, bounds, pop=de.pop, F=de.F, CR=de.CR, max_gen=de.max_gen,
                                 seed=seed if seed is not None else cfg.seed, x0=x_seed,
                                 ftol=de.ftol, workers=cfg.workers)
    info = {"seed_params": [float(x) for x in x_seed], "seed_cost": float(obj(x_seed)),
            "de_cost": res.fun, "de_nfev": res.nfev, "de_generations": res.nit, "factor": f}
    return Pose6DoF.from_vector(res.x, pivot=pivot), info


def _level_mask(mask, factor):
    return None if mask is None else downsample_mask(mask, factor)


def _level_dilation(cfg: RegistrationConfig, factor: int) -> int:
    return max(1, int(math.ceil(cfg.region_dilation_px / factor)))


# -- kinematic priority module ---------------------------------------------------------

def _unwrap_to(angles, reference):
    a = np.asarray(angles, dtype=float)
    ref = np.asarray(reference, dtype=float)
    return a + 360.0 * np.round((ref - a) / 360.0)


def pose_velocity(current: Pose6DoF, previous: Pose6DoF) -> np.ndarray:
    """Frame-to-frame change: translation delta and world-frame rotation vector (deg)."""
    dt = current.translation - previous.translation
    Rc = euler_to_rotation(*current.angles)
    Rp = euler_to_rotation(*previous.angles)
    w = np.degrees(rotation_vector(Rc @ Rp.T))
    return np.concatenate([dt, w])


def kpm_predict(state: KPMState, cfg: RegistrationConfig | None = None):
    """Constant-velocity prediction restricted to flexion about ``state.flexion_axis``.

    The translation step is clamped per axis to the KPM translation step; the
    rotation step keeps only its component about the flexion axis, clamped to
    the KPM rotation step. Returns the predicted pose and the narrowed search
    box around it.
    """
    cfg = cfg or RegistrationConfig()
    k = cfg.kpm
    vel = state.velocity * k.velocity_weight
    dt = np.clip(vel[:3], -k.step_translation_mm, k.step_translation_mm)
    a = state.flexion_axis
    w_flex = float(np.clip(vel[3:] @ a, -k.step_rotation_deg, k.step_rotation_deg))
    prev = state.pose
    R = rotation_from_vector(np.radians(w_flex) * a) @ euler_to_rotation(*prev.angles)
    angles = _unwrap_to(rotation_to_euler(R), prev.angles)
    params = np.concatenate([prev.translation + dt, angles])
    pred = Pose6DoF.from_vector(params, pivot=prev.pivot)
    t, r = k.window_translation_mm, k.window_rotation_deg
    return pred, BoxBounds.around(params, [t, t, t, r, r, r])


# -- local refinement --------------------------------------------------------------

def refine_local(fixed: Image2D, v: Volume, mask: BoneMask3D, g: ProjectionGeometry, start: Pose6DoF,
                 cfg: RegistrationConfig | None = None, prepared=None, bone: str | None = None,
                 route: str = "local", exclude=None, alternatives=(),
                 tilt_reference: Pose6DoF | None = None) -> BoneRegistration:
    """Hybrid Powell/Nelder-Mead at each pyramid level, coarse to fine.

    ``alternatives`` are extra start poses refined alongside ``start`` on the
    coarse levels; the full-resolution stage continues from the candidate
    with the lowest full-resolution cost, the original start included, so the
    returned cost never exceeds the start's. With ``tilt_reference`` the
    tilt twins of the final pose (see :func:`tilt_candidates`) are scored at
    full resolution and the best one is refined if it beats the result.
    """
    cfg = cfg or RegistrationConfig()
    start.validate()
    pivot = start.pivot
    prepared = prepared if prepared is not None else prepare_volume(v, mask)
    x_start = start.as_vector()
    xs = [x_start] + [a.as_vector() for a in alternatives]
    stages = []
    evaluations = {}
    cost = math.nan
    x = x_start
    for lv in cfg.levels:
        obj = BoneObjective(fixed.downsample(lv.factor), v, mask, g.downsample(lv.factor), pivot=pivot,
                            prepared=prepared, dilation=_level_dilation(cfg, lv.factor),
                            exclude=_level_mask(exclude, lv.factor))
        final = lv.factor == 1
        if final:
            f_start = obj(x_start)
            if not math.isfinite(f_start):
                raise RefinementError("cost is not finite at the start pose")
            fs = [obj(c) for c in xs] + [f_start]
            k = int(np.argmin(fs))
            xs = [(xs + [x_start])[k]]
        refined, rounds = [], 0
        for c in xs:
            fc = obj(c)
            res = hybrid_powell_nm(obj, c, xtol=lv.xtol, ftol=lv.ftol, max_rounds=lv.max_rounds,
                                   step=lv.step, max_fev=lv.max_fev)
            rounds += res.info.get("rounds", 0)
            refined.append((res.x, res.fun) if res.fun <= fc else (c, fc))
        xs = [c for c, _ in refined]
        k = int(np.argmin([f for _, f in refined]))
        x, cost = refined[k]
        key = f"refine_x{lv.factor}"
        evaluations[key] = obj.evaluations
        stages.append({"stage": key, "factor": lv.factor, "cost": float(cost), "nfev": obj.evaluations,
                       "rounds": rounds, "candidates": len(refined)})
    if tilt_reference is not None:
        n0 = obj.evaluations
        twins = [t.as_vector() for t in tilt_candidates(Pose6DoF.from_vector(x, pivot=pivot), tilt_reference, g)]
        ft = [obj(t) for t in twins]
        k = int(np.argmin(ft))
        adopted = False
        if ft[k] < cost:
            lv = cfg.levels[-1]
            res = hybrid_powell_nm(obj, twins[k], xtol=lv.xtol, ftol=lv.ftol, max_rounds=lv.max_rounds,
                                   step=lv.step, max_fev=lv.max_fev)
            if res.fun < cost:
                x, cost, adopted = res.x, res.fun, True
        evaluations["tilt_check"] = obj.evaluations - n0
        stages.append({"stage": "tilt_check", "twin_costs": [float(f) for f in ft], "adopted": adopted,
                       "cost": float(cost), "nfev": obj.evaluations - n0})
    return BoneRegistration(bone or mask.label, Pose6DoF.from_vector(x, pivot=pivot), float(cost), route,
                            evaluations, stages)


def tilt_candidates(pose: Pose6DoF, reference: Pose6DoF, g: ProjectionGeometry) -> list:
    """Twins of ``pose`` with its out-of-plane rotation reversed and removed.

    A single projection barely distinguishes a tilt toward the source from
    the same tilt away from it, so near-symmetric bones have twin minima on
    either side of the untilted pose. The rotation ``pose * reference^-1`` is
    split into components about the detector axes and about the beam; the
    twins flip or drop the detector-axis part and keep the rest.
    """
    R = euler_to_rotation(*pose.angles)
    Rr = euler_to_rotation(*reference.angles)
    w = rotation_vector(R @ Rr.T)
    n = g.normal
    w_beam = (w @ n) * n
    out = []
    for w_new in (2.0 * w_beam - w, w_beam):
        Rm = rotation_from_vector(w_new) @ Rr
        angles = _unwrap_to(rotation_to_euler(Rm), pose.angles)
        out.append(pose.with_params(np.concatenate([pose.translation, angles])))
    return out


# -- frames and sequences ------------------------------------------------------------

@dataclass
class BoneModel:
    """Per-bone data reused across frames."""

    mask: BoneMask3D
    pivot: tuple
    axis: PrincipalAxis
    prepared: object

    @classmethod
    def build(cls, v: Volume, mask: BoneMask3D) -> "BoneModel":
        mask.check_grid(v)
        axis = principal_axis(mask_to_pointcloud(mask, 20000))
        return cls(mask, tuple(mask.centroid()), axis, prepare_volume(v, mask))


def build_models(v: Volume, masks) -> dict:
    return {name: BoneModel.build(v, m) for name, m in _named(masks).items()}


def _named(masks) -> dict:
    if isinstance(masks, dict):
        return dict(masks)
    return {m.label: m for m in masks}


def register_bone(fixed: Image2D, v: Volume, model: BoneModel, g: ProjectionGeometry,
                  prior: KPMState | None, cfg: RegistrationConfig, frame: int = 0,
                  bone: str | None = None, exclude=None) -> BoneRegistration:
    bone = bone or model.mask.label
    t0 = time.perf_counter()
    use_kpm = prior is not None and cfg.kpm.enabled and not cfg.force_de
    try:
        if fixed.mask is None or not fixed.mask.any():
            raise InitializationError(f"no 2-D mask for {bone} in frame {frame}")
        if use_kpm:
            start, window = kpm_predict(prior, cfg)
            route, init_info, init_evals = "kpm", {"predicted": start.to_dict(),
                                                   "window_lower": window.lower.tolist(),
                                                   "window_upper": window.upper.tolist()}, {}
        else:
            seed = bone_seed(cfg.seed, frame, bone)
            start, init_info = initialize_global(fixed, v, model.mask, g, model.axis, cfg,
                                                 seed=seed, pivot=model.pivot, prepared=model.prepared,
                                                 exclude=exclude)
            route, init_evals = "de", {"de": int(init_info["de_nfev"])}
        alternatives, reference = (), None
        if cfg.tilt_check:
            if route == "de":
                seed_params = init_info["seed_params"]
            else:
                seed_params = axis_seed(fixed, g, model.axis, model.pivot)
            reference = Pose6DoF.from_vector(seed_params, pivot=model.pivot)
            if route == "de":
                alternatives = tuple(tilt_candidates(start, reference, g))
        res = refine_local(fixed, v, model.mask, g, start, cfg, prepared=model.prepared, bone=bone,
                           route=route, exclude=exclude, alternatives=alternatives, tilt_reference=reference)
        res.evaluations = {**init_evals, **res.evaluations}
        res.stages = [{"stage": "init", "route": route, **init_info}] + res.stages
    except Exception as exc:  # per-bone failures are reported, not raised
        log.warning("frame %d bone %s failed: %s", frame, bone, exc)
        res = BoneRegistration(bone, None, WORST_COST, "kpm" if use_kpm else "de", ok=False, error=str(exc))
    res.wall_time = time.perf_counter() - t0
    return res


def register_frame(fixed: Image2D, v: Volume, masks, g: ProjectionGeometry, prior: dict | None = None,
                   cfg: RegistrationConfig | None = None, fixed_masks: dict | None = None, frame: int = 0,
                   models: dict | None = None) -> RegistrationResult:
    """Register every bone independently in one frame.

    ``fixed_masks`` maps bone names to 2-D masks on the fixed image (the
    segmentation of the frame); without it ``fixed.mask`` is used for every
    bone. With ``cfg.exclude_overlap`` the other bones' 2-D masks are left
    out of each bone's comparison region. ``prior`` maps bone names to :class:`KPMState`; bones with a prior
    take the KPM route, others the global route.
    """
    cfg = cfg or RegistrationConfig()
    t0 = time.perf_counter()
    masks = _named(masks)
    models = models or build_models(v, masks)
    out = {}
    for name in masks:
        fm = fixed_masks.get(name) if fixed_masks else fixed.mask
        fixed_b = fixed.with_mask(fm) if fm is not None else fixed
        exclude = None
        if fixed_masks and cfg.exclude_overlap:
            others = [m for k, m in fixed_masks.items() if k != name and m is not None]
            if others:
                exclude = np.logical_or.reduce([np.asarray(m, dtype=bool) for m in others])
        out[name] = register_bone(fixed_b, v, models[name], g, (prior or {}).get(name), cfg, frame, name,
                                  exclude)
    return RegistrationResult(out, frame, time.perf_counter() - t0)


def track_sequence(frames, v: Volume, masks, g: ProjectionGeometry, cfg: RegistrationConfig | None = None,
                   fixed_masks=None, flexion_axis=(1.0, 0.0, 0.0), models: dict | None = None) -> SequenceResult:
    """Register frames in order, threading KPM state from frame to frame.

    ``fixed_masks`` is a per-frame list of bone-name -> 2-D mask dicts. The
    velocity of a bone is the change between its last two successful
    registrations (zero after the first). A failed bone keeps its last good
    state.
    """
    cfg = cfg or RegistrationConfig()
    if len(frames) < 1:
        raise ValueError("need at least one frame")
    masks = _named(masks)
    models = models or build_models(v, masks)
    states: dict = {}
    results, snapshots = [], []
    for n, fixed in enumerate(frames):
        fm = fixed_masks[n] if fixed_masks is not None else None
        prior = states if cfg.kpm.enabled and not cfg.force_de else None
        res = register_frame(fixed, v, masks, g, prior, cfg, fm, frame=n, models=models)
        for name, br in res.bones.items():
            if not br.ok:
                continue
            prev = states.get(name)
            vel = np.zeros(6) if prev is None else pose_velocity(br.pose, prev.pose)
            states[name] = KPMState(br.pose, vel, flexion_axis)
        results.append(res)
        snapshots.append(dict(states))
    return SequenceResult(results, snapshots)
