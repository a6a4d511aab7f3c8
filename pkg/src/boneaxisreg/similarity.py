"""Normalized cross-correlation and the per-bone registration cost."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import Pose6DoF
from .projector import (
    Image2D,
    ProjectionGeometry,
    prepare_volume,
    raycast_pixels,
    render_mask_projection,
)
from .volume import BoneMask3D, Volume

WORST_COST = 2.0
REGION_DILATION_PX = 3


class UndefinedNCCError(ValueError):
    """Raised when an image is constant over the comparison region."""


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    count: int


def ncc(a, b, region=None) -> SimilarityScore:
    """Normalized cross-correlation of two images over an optional boolean region."""
    A = a.data if isinstance(a, Image2D) else np.asarray(a, dtype=float)
    B = b.data if isinstance(b, Image2D) else np.asarray(b, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"image shapes differ: {A.shape} vs {B.shape}")
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != A.shape:
            raise ValueError(f"region shape {region.shape} != image shape {A.shape}")
        A, B = A[region], B[region]
    else:
        A, B = A.ravel(), B.ravel()
    n = A.size
    if n < 2:
        raise ValueError("NCC needs at least two pixels in the region")
    return SimilarityScore(_ncc_values(A, B), n)


def _ncc_values(A, B) -> float:
    a = A - A.mean()
    b = B - B.mean()
    saa = float(a @ a)
    sbb = float(b @ b)
    if saa <= 0.0 or sbb <= 0.0:
        raise UndefinedNCCError("image is constant over the region")
    return float(a @ b) / (np.sqrt(saa) * np.sqrt(sbb))


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    return x * x + y * y <= r * r


def dilate_region(mask2d, radius: int = REGION_DILATION_PX) -> np.ndarray:
    m = np.asarray(mask2d, dtype=bool)
    if radius <= 0:
        return m.copy()
    return ndimage.binary_dilation(m, structure=disk(radius))


class BoneObjective:
    """Cost ``1 - NCC`` between a fixed image and the DRR of one posed bone.

    The moving image is the DRR of the volume restricted to ``mask``. The
    comparison region is the dilated 2-D bone mask of the fixed image when it
    carries one; otherwise the dilated projection of ``mask`` at
    ``region_pose``. Pixels in ``exclude`` (typically the fixed-image masks of
    the other bones, whose intensity the single-bone DRR cannot model) are
    removed from the region. The region stays fixed for the life of the object, which
    keeps the cost continuous in the pose. Calling the object with a 6-vector
    returns the cost; ``evaluations`` counts calls.
    """

    def __init__(self, fixed: Image2D, v: Volume, mask: BoneMask3D, g: ProjectionGeometry,
                 pivot=None, region=None, region_pose: Pose6DoF | None = None,
                 dilation: int = REGION_DILATION_PX, prepared=None, exclude=None):
        if fixed.data.shape != (g.nv, g.nu):
            raise ValueError(f"fixed image shape {fixed.data.shape} does not match geometry {(g.nv, g.nu)}")
        self.geometry = g
        self.pivot = tuple(mask.centroid()) if pivot is None else tuple(pivot)
        self.prepared = prepared if prepared is not None else prepare_volume(v, mask)
        if region is None:
            if fixed.mask is not None and fixed.mask.any():
                base = fixed.mask
            else:
                pose = region_pose or Pose6DoF.identity(self.pivot)
                base = render_mask_projection(mask, pose, g).mask
            region = dilate_region(base, dilation)
        region = np.asarray(region, dtype=bool)
        if exclude is not None:
            region = region & ~np.asarray(exclude, dtype=bool)
        self.region = region
        jj, ii = np.nonzero(self.region)
        self.pix_i = ii.astype(np.int64)
        self.pix_j = jj.astype(np.int64)
        f = fixed.data[self.region]
        self._fixed_centered = f - f.mean()
        self._fixed_norm = float(np.sqrt(self._fixed_centered @ self._fixed_centered))
        self.evaluations = 0

    def pose(self, params) -> Pose6DoF:
        return Pose6DoF.from_vector(params, pivot=self.pivot)

    def moving_values(self, params) -> np.ndarray:
        return raycast_pixels(self.prepared, self.pose(params), self.geometry, self.pix_i, self.pix_j)[0]

    def __call__(self, params) -> float:
        self.evaluations += 1
        params = np.asarray(params, dtype=float)
        if not np.all(np.isfinite(params)):
            return WORST_COST
        if self.pix_i.size < 2 or self._fixed_norm <= 0.0:
            return WORST_COST
        m = self.moving_values(params)
        m = m - m.mean()
        mm = float(m @ m)
        if mm <= 0.0:
            return WORST_COST
        return 1.0 - float(self._fixed_centered @ m) / (self._fixed_norm * np.sqrt(mm))


def objective(fixed: Image2D, v: Volume, mask: BoneMask3D, g: ProjectionGeometry, pose: Pose6DoF) -> float:
    """``1 - NCC(fixed, DRR of the posed bone)`` over the dilated bone region.

    Without a mask on ``fixed`` the region is the dilated projection of the
    bone at ``pose`` itself. An undefined NCC maps to the worst cost, 2.
    """
    obj = BoneObjective(fixed, v, mask, g, pivot=pose.pivot, region_pose=pose)
    return obj(pose.as_vector())
