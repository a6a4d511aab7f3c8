"""Analytic knee phantom with exact bone masks and landmarks.

All shapes are defined in millimetres about a world origin at the joint line.
+z is superior, +y anterior, +x lateral (right knee). Voxels are classified
by their centre point, so the masks are exact for the sampled grid.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .volume import BoneMask3D, Volume


class PhantomConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (128, 128, 128)
    spacing: float = 1.0
    mu_cortical: float = 0.05
    mu_cancellous: float = 0.03
    mu_soft: float = 0.01
    cortical_shell_mm: float = 2.0
    soft_tissue_radius_mm: float = 50.0

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        if "dims" in d:
            d["dims"] = tuple(int(x) for x in d["dims"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dims"] = list(self.dims)
        return out


# Anatomy (mm). Condyle spheres are dense subchondral bone: cortical throughout.
FEMUR_SHAFT = dict(center=(0.0, 0.0), radius=12.0, z=(14.0, 58.0))
CONDYLE_RADIUS = 12.0
MEDIAL_CONDYLE = (-12.0, -5.0, 14.0)
LATERAL_CONDYLE = (12.0, -5.0, 14.0)
PLATEAU = dict(center=(0.0, -2.0, -10.0), semi=(30.0, 22.0, 8.0))
TIBIA_SHAFT = dict(center=(0.0, -2.0), radius=11.0, z=(-58.0, -10.0))
FIBULA = dict(center=(24.0, -10.0), radius=5.0, z=(-54.0, -9.0))
PATELLA = dict(center=(0.0, 22.0, 20.0), semi=(14.0, 5.0, 18.0))
PLATEAU_TOP_Z = PLATEAU["center"][2] + PLATEAU["semi"][2]
BONE_BOUNDS = (np.array([-30.0, -24.0, -58.0]), np.array([30.0, 27.0, 58.0]))


def _cylinder(X, Y, Z, center, radius, z, shell):
    r = np.hypot(X - center[0], Y - center[1])
    inside = (r <= radius) & (Z >= z[0]) & (Z <= z[1])
    core = inside & (r <= radius - shell)
    return inside, core


def _ellipsoid(X, Y, Z, center, semi, shell):
    q = sum(((C - c) / s) ** 2 for C, c, s in zip((X, Y, Z), center, semi))
    inside = q <= 1.0
    shrunk = [max(s - shell, 1e-6) for s in semi]
    qc = sum(((C - c) / s) ** 2 for C, c, s in zip((X, Y, Z), center, shrunk))
    return inside, inside & (qc <= 1.0)


def _sphere(X, Y, Z, center, radius):
    return (X - center[0]) ** 2 + (Y - center[1]) ** 2 + (Z - center[2]) ** 2 <= radius**2


def phantom_landmarks() -> dict:
    """Named landmarks of the phantom at neutral pose (mm)."""
    return {
        "medial_condyle_center": list(MEDIAL_CONDYLE),
        "lateral_condyle_center": list(LATERAL_CONDYLE),
        "condyle_radius_mm": CONDYLE_RADIUS,
        "plateau_medial": [-12.0, -5.0, PLATEAU_TOP_Z],
        "plateau_lateral": [12.0, -5.0, PLATEAU_TOP_Z],
        "plateau_anterior": [0.0, 10.0, PLATEAU_TOP_Z],
        "plateau_normal": [0.0, 0.0, 1.0],
        "flexion_center": [0.0, -5.0, 14.0],
    }


def make_knee_phantom(config: PhantomConfig | None = None):
    """Build the phantom volume.

    Returns ``(volume, masks, landmarks)`` where ``masks`` maps
    ``femur``/``patella``/``tibia_fibula`` to :class:`BoneMask3D`.
    """
    cfg = config or PhantomConfig()
    dims = tuple(int(d) for d in cfg.dims)
    if len(dims) != 3 or min(dims) < 64:
        raise PhantomConfigError(f"phantom dims must be >= 64 per axis, got {dims}")
    if not (0 < cfg.spacing <= 2.0):
        raise PhantomConfigError(f"phantom spacing must be in (0, 2] mm, got {cfg.spacing}")
    if not (cfg.mu_cortical > cfg.mu_cancellous > cfg.mu_soft >= 0):
        raise PhantomConfigError("attenuations must satisfy cortical > cancellous > soft >= 0")
    sp = float(cfg.spacing)
    extent = np.asarray(dims) * sp
    origin = -extent / 2.0
    lo, hi = BONE_BOUNDS
    if np.any(lo - sp < origin) or np.any(hi + sp > origin + extent):
        raise PhantomConfigError(
            f"bones span {lo.tolist()}..{hi.tolist()} mm but grid covers "
            f"{origin.tolist()}..{(origin + extent).tolist()} mm"
        )

    axes = [origin[k] + (np.arange(dims[k]) + 0.5) * sp for k in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij", sparse=True)
    shell = cfg.cortical_shell_mm

    shaft, shaft_core = _cylinder(X, Y, Z, FEMUR_SHAFT["center"], FEMUR_SHAFT["radius"], FEMUR_SHAFT["z"], shell)
    condyles = _sphere(X, Y, Z, MEDIAL_CONDYLE, CONDYLE_RADIUS) | _sphere(X, Y, Z, LATERAL_CONDYLE, CONDYLE_RADIUS)
    femur = shaft | condyles
    femur_core = shaft_core & ~condyles

    plateau, plateau_core = _ellipsoid(X, Y, Z, PLATEAU["center"], PLATEAU["semi"], shell)
    tshaft, tshaft_core = _cylinder(X, Y, Z, TIBIA_SHAFT["center"], TIBIA_SHAFT["radius"], TIBIA_SHAFT["z"], shell)
    fib, fib_core = _cylinder(X, Y, Z, FIBULA["center"], FIBULA["radius"], FIBULA["z"], shell)
    tibia = plateau | tshaft | fib
    tibia_core = plateau_core | tshaft_core | fib_core

    patella, patella_core = _ellipsoid(X, Y, Z, PATELLA["center"], PATELLA["semi"], shell)

    soft = np.broadcast_to(np.hypot(X, Y) <= cfg.soft_tissue_radius_mm, dims)
    data = np.where(soft, cfg.mu_soft, 0.0)
    bones = femur | tibia | patella
    data = np.where(bones, cfg.mu_cortical, data)
    data = np.where(femur_core | tibia_core | patella_core, cfg.mu_cancellous, data)
    vol = Volume(data.astype(np.float32), (sp, sp, sp), tuple(origin))

    masks = {
        "femur": BoneMask3D.like(vol, np.broadcast_to(femur, dims), "femur"),
        "patella": BoneMask3D.like(vol, np.broadcast_to(patella, dims), "patella"),
        "tibia_fibula": BoneMask3D.like(vol, np.broadcast_to(tibia, dims), "tibia_fibula"),
    }
    return vol, masks, phantom_landmarks()


def save_landmarks(landmarks: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(landmarks, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_landmarks(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
