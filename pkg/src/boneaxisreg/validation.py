"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np

from .projector import Image2D, ProjectionGeometry
from .volume import BONE_LABELS, BoneMask3D, EmptySegmentationError, Volume


def check_volume(v) -> Volume:
    if isinstance(v, Volume):
        return v
    arr = np.asarray(v)
    if arr.ndim != 3:
        raise ValueError(f"expected a Volume or a 3-D array, got shape {arr.shape}")
    return Volume(arr.astype(np.float32))


def check_masks(masks, v: Volume) -> dict:
    """Return a name -> mask dict, checking grids and non-emptiness."""
    if isinstance(masks, BoneMask3D):
        masks = [masks]
    named = dict(masks) if isinstance(masks, dict) else {m.label: m for m in masks}
    if not named:
        raise ValueError("no bone masks given")
    for name, m in named.items():
        if not isinstance(m, BoneMask3D):
            raise TypeError(f"mask {name!r} is {type(m).__name__}, expected BoneMask3D")
        m.check_grid(v)
        if m.count == 0:
            raise EmptySegmentationError(f"mask {name!r} is empty")
    unknown = set(named) - set(BONE_LABELS)
    if unknown:
        raise ValueError(f"unknown bone labels {sorted(unknown)}; expected a subset of {BONE_LABELS}")
    return named


def check_frames(frames, g: ProjectionGeometry) -> list:
    if isinstance(frames, Image2D):
        frames = [frames]
    out = []
    for k, f in enumerate(frames):
        if not isinstance(f, Image2D):
            f = Image2D(np.asarray(f, dtype=float), (g.pu, g.pv))
        if f.data.shape != (g.nv, g.nu):
            raise ValueError(f"frame {k} has shape {f.data.shape}, geometry expects {(g.nv, g.nu)}")
        out.append(f)
    if not out:
        raise ValueError("no frames given")
    return out


def check_frame_masks(fixed_masks, frames: list, bones) -> list | None:
    """Per-frame bone-name -> 2-D mask dicts, or ``None``."""
    if fixed_masks is None:
        return None
    fixed_masks = list(fixed_masks)
    if len(fixed_masks) != len(frames):
        raise ValueError(f"{len(fixed_masks)} mask sets for {len(frames)} frames")
    for k, (fm, f) in enumerate(zip(fixed_masks, frames)):
        missing = set(bones) - set(fm)
        if missing:
            raise ValueError(f"frame {k} lacks 2-D masks for {sorted(missing)}")
        for name, m in fm.items():
            if np.shape(m) != f.data.shape:
                raise ValueError(f"frame {k} mask {name!r} has shape {np.shape(m)}")
    return fixed_masks


def check_geometry(g) -> ProjectionGeometry:
    if g is None:
        return ProjectionGeometry.lateral()
    if isinstance(g, dict):
        g = ProjectionGeometry.from_dict(g)
    g.validate()
    return g
