"""Voxel volumes, bone masks, point clouds and principal axes.

World coordinates of voxel ``(i, j, k)`` are ``origin + (index + 0.5) * spacing``.
Arrays are indexed ``[i, j, k]`` with shape ``(nx, ny, nz)``; on disk they are
written x-fastest.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

BONE_LABELS = ("femur", "patella", "tibia_fibula")


class VolumeFormatError(ValueError):
    pass


class EmptySegmentationError(ValueError):
    pass


class DegenerateAxisError(ValueError):
    pass


def _check_grid(dims, spacing, origin):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise VolumeFormatError("grid metadata must be 3-dimensional")
    if min(dims) < 1:
        raise VolumeFormatError(f"dims must be >= 1 on every axis, got {dims}")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise VolumeFormatError(f"spacing must be positive, got {spacing}")
    if not all(math.isfinite(o) for o in origin):
        raise VolumeFormatError(f"origin must be finite, got {origin}")
    return dims, spacing, origin


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise VolumeFormatError(f"volume data must be 3-D, got shape {data.shape}")
        _, spacing, origin = _check_grid(data.shape, self.spacing, self.origin)
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("volume contains non-finite values")
        if data.size and data.min() < 0:
            raise VolumeFormatError("attenuation values must be >= 0")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def voxel_centers(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=float)
        return np.asarray(self.origin) + (idx + 0.5) * np.asarray(self.spacing)

    def world_to_index(self, points) -> np.ndarray:
        """Continuous voxel index of world points (voxel centres land on integers)."""
        pts = np.asarray(points, dtype=float)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing) - 0.5

    def sample_nearest(self, point) -> float:
        i, j, k = np.rint(self.world_to_index(point)).astype(int)
        return float(self.data[i, j, k])

    def masked(self, mask: "BoneMask3D") -> "Volume":
        """Copy with everything outside ``mask`` set to zero."""
        mask.check_grid(self)
        return Volume(np.where(mask.data, self.data, 0.0), self.spacing, self.origin)

    def same_grid(self, other) -> bool:
        return (
            self.dims == tuple(other.data.shape)
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )


@dataclass(frozen=True)
class BoneMask3D:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    label: str = "bone"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=bool)
        if data.ndim != 3:
            raise VolumeFormatError(f"mask data must be 3-D, got shape {data.shape}")
        _, spacing, origin = _check_grid(data.shape, self.spacing, self.origin)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def like(cls, v: Volume, data, label="bone") -> "BoneMask3D":
        return cls(data, v.spacing, v.origin, label)

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def check_grid(self, v: Volume) -> None:
        if not v.same_grid(self):
            raise VolumeFormatError(f"mask {self.label!r} grid differs from volume grid")

    def centroid(self) -> np.ndarray:
        idx = np.argwhere(self.data)
        if len(idx) == 0:
            raise EmptySegmentationError(f"mask {self.label!r} is empty")
        return np.asarray(self.origin) + (idx.mean(axis=0) + 0.5) * np.asarray(self.spacing)


@dataclass(frozen=True)
class PrincipalAxis:
    centroid: np.ndarray
    direction: np.ndarray
    extents: np.ndarray

    def to_dict(self) -> dict:
        return {
            "centroid": [float(c) for c in self.centroid],
            "direction": [float(c) for c in self.direction],
            "extents": [float(c) for c in self.extents],
        }

    @classmethod
    def from_dict(cls, d) -> "PrincipalAxis":
        return cls(np.asarray(d["centroid"], float), np.asarray(d["direction"], float),
                   np.asarray(d["extents"], float))


# -- file I/O ---------------------------------------------------------------

def _sidecar(path) -> str:
    return os.fspath(path) + ".json"


def _write_grid(path, array, spacing, origin, dtype, extra=None):
    path = os.fspath(path)
    header = {
        "dims": [int(d) for d in array.shape],
        "spacing_mm": [float(s) for s in spacing],
        "origin_mm": [float(o) for o in origin],
        "dtype": dtype,
        "order": "x-fastest",
    }
    if extra:
        header.update(extra)
    np_dtype = "<f4" if dtype == "f32le" else "u1"
    with open(path, "wb") as fh:
        fh.write(np.asarray(array).astype(np_dtype).tobytes(order="F"))
    with open(_sidecar(path), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_grid(path, expect_dtype):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if not os.path.exists(_sidecar(path)):
        raise FileNotFoundError(_sidecar(path))
    with open(_sidecar(path)) as fh:
        header = json.load(fh)
    try:
        dims, spacing, origin = _check_grid(header["dims"], header["spacing_mm"], header["origin_mm"])
    except KeyError as exc:
        raise VolumeFormatError(f"sidecar missing key {exc}") from None
    if header.get("dtype") != expect_dtype:
        raise VolumeFormatError(f"expected dtype {expect_dtype}, sidecar says {header.get('dtype')}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"unsupported order {header.get('order')!r}")
    np_dtype = "<f4" if expect_dtype == "f32le" else "u1"
    raw = np.fromfile(path, dtype=np_dtype)
    n = dims[0] * dims[1] * dims[2]
    if raw.size != n:
        raise VolumeFormatError(f"{path}: expected {n} values from header, found {raw.size}")
    return raw.reshape(dims, order="F"), spacing, origin, header


def save_volume(v: Volume, path) -> None:
    _write_grid(path, v.data, v.spacing, v.origin, "f32le")


def load_volume(path) -> Volume:
    data, spacing, origin, _ = _read_grid(path, "f32le")
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: non-finite values")
    return Volume(data.astype(np.float32), spacing, origin)


def save_mask(m: BoneMask3D, path) -> None:
    _write_grid(path, m.data, m.spacing, m.origin, "u8", {"label": m.label})


def load_mask(path) -> BoneMask3D:
    data, spacing, origin, header = _read_grid(path, "u8")
    return BoneMask3D(data.astype(bool), spacing, origin, header.get("label", "bone"))


# -- segmentation surrogate ---------------------------------------------------

def threshold_segment(v: Volume, threshold: float, min_voxels: int = 50) -> list[BoneMask3D]:
    """Connected components of ``v >= threshold`` labelled by position.

    The highest component is the femur, the lowest the tibia-fibula, and a third
    (smallest) component, if present, the patella. Extra components beyond three
    are discarded smallest-first.
    """
    binary = v.data >= threshold
    labels, n = ndimage.label(binary)
    if n == 0:
        raise EmptySegmentationError(f"no voxels >= {threshold}")
    sizes = ndimage.sum_labels(binary, labels, index=np.arange(1, n + 1))
    keep = [i + 1 for i in np.argsort(-sizes, kind="stable") if sizes[i] >= min_voxels][:3]
    if not keep:
        raise EmptySegmentationError(f"no component of >= {min_voxels} voxels above {threshold}")
    comps = []
    for lab in keep:
        m = BoneMask3D.like(v, labels == lab)
        comps.append((m, m.centroid(), int(sizes[lab - 1])))

    names: dict[int, str] = {}
    if len(comps) == 3:
        small = min(range(3), key=lambda i: comps[i][2])
        names[small] = "patella"
        rest = [i for i in range(3) if i != small]
    else:
        rest = list(range(len(comps)))
    rest.sort(key=lambda i: -comps[i][1][2])
    names[rest[0]] = "femur"
    if len(rest) > 1:
        names[rest[1]] = "tibia_fibula"
    out = [BoneMask3D(c[0].data, v.spacing, v.origin, names[i]) for i, c in enumerate(comps)]
    order = {name: k for k, name in enumerate(BONE_LABELS)}
    return sorted(out, key=lambda m: order[m.label])


def mask_to_pointcloud(m: BoneMask3D, max_points: int | None = None) -> np.ndarray:
    """World coordinates of mask voxel centres, stride-subsampled to ``max_points``.

    The stride is fractional (``len / max_points``, floored per sample), which
    keeps exactly ``max_points`` voxels and avoids the slice aliasing an
    integer stride has on the x-major voxel order.
    """
    idx = np.argwhere(m.data)
    if len(idx) == 0:
        raise EmptySegmentationError(f"mask {m.label!r} is empty")
    if max_points is not None and len(idx) > max_points:
        k = int(max_points)
        idx = idx[(np.arange(k) * len(idx)) // k]
    return np.asarray(m.origin) + (idx + 0.5) * np.asarray(m.spacing)


def _orient(direction: np.ndarray) -> np.ndarray:
    for k in (2, 1, 0):
        c = direction[k]
        if abs(c) > 1e-12:
            return direction if c > 0 else -direction
    return direction


def principal_axis(points) -> PrincipalAxis:
    """PCA of a point cloud.

    The direction is the dominant covariance eigenvector, signed so that its z
    component is non-negative (ties broken on y, then x).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise DegenerateAxisError("need at least two 3-D points")
    centroid = pts.mean(axis=0)
    cov = np.cov(pts - centroid, rowvar=False, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    if evals[0] <= 1e-12 * max(1.0, float(np.abs(pts).max()) ** 2):
        raise DegenerateAxisError("point cloud covariance has rank 0")
    d = _orient(evecs[:, 0] / np.linalg.norm(evecs[:, 0]))
    return PrincipalAxis(centroid, d, evals)
