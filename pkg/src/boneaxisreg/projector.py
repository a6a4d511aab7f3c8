"""Cone-beam ray-driven forward projection.

The pose moves the volume; the source and detector stay fixed. Each pixel value
is the line integral of attenuation from the source to the pixel centre,
estimated by sampling the ray every ``step`` mm (``min(spacing) / 2`` by
default) with trilinear interpolation. Sample positions are anchored at the
source, so the result is a continuous function of the pose.

Images are stored as arrays of shape ``(nv, nu)``: rows follow the detector
``v`` axis, columns the ``u`` axis.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numba
import numpy as np

from .geometry import Pose6DoF, pose_to_matrix
from .volume import BoneMask3D, Volume


class GeometryError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionGeometry:
    source: tuple
    det_center: tuple
    u: tuple
    v: tuple
    nu: int
    nv: int
    pu: float
    pv: float

    def __post_init__(self):
        for name in ("source", "det_center", "u", "v"):
            object.__setattr__(self, name, tuple(float(c) for c in np.asarray(getattr(self, name), float).reshape(3)))
        object.__setattr__(self, "nu", int(self.nu))
        object.__setattr__(self, "nv", int(self.nv))
        object.__setattr__(self, "pu", float(self.pu))
        object.__setattr__(self, "pv", float(self.pv))
        self.validate()

    def validate(self) -> None:
        u, v = np.asarray(self.u), np.asarray(self.v)
        if abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9:
            raise GeometryError("detector axes must be unit vectors")
        if abs(u @ v) > 1e-9:
            raise GeometryError("detector axes must be orthogonal")
        if self.nu < 1 or self.nv < 1 or not (self.pu > 0 and self.pv > 0):
            raise GeometryError("detector size and pixel spacing must be positive")
        if not (np.all(np.isfinite(self.source)) and np.all(np.isfinite(self.det_center))):
            raise GeometryError("non-finite source or detector position")
        if self.sdd <= 1e-9:
            raise GeometryError("source lies on the detector plane")

    @classmethod
    def lateral(cls, sad=600.0, sdd=1000.0, nu=256, nv=256, pixel=1.2) -> "ProjectionGeometry":
        """Beam along +x through the world origin (the isocentre)."""
        return cls((-sad, 0.0, 0.0), (sdd - sad, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0),
                   nu, nv, pixel, pixel)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    @property
    def sdd(self) -> float:
        """Perpendicular source-to-detector distance."""
        return float(np.dot(np.subtract(self.det_center, self.source), self.normal))

    def magnification(self, point) -> float:
        depth = float(np.dot(np.subtract(point, self.source), self.normal))
        return self.sdd / depth

    def pixel_centers(self) -> np.ndarray:
        """World positions of all pixel centres, shape ``(nv, nu, 3)``."""
        i = (np.arange(self.nu) - (self.nu - 1) / 2.0) * self.pu
        j = (np.arange(self.nv) - (self.nv - 1) / 2.0) * self.pv
        return (np.asarray(self.det_center) + i[None, :, None] * np.asarray(self.u)
                + j[:, None, None] * np.asarray(self.v))

    def project(self, points) -> np.ndarray:
        """Continuous pixel coordinates ``(i, j)`` of world points."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        S, C = np.asarray(self.source), np.asarray(self.det_center)
        n = self.normal
        s = ((C - S) @ n) / ((P - S) @ n)
        Q = S + s[:, None] * (P - S)
        i = (Q - C) @ np.asarray(self.u) / self.pu + (self.nu - 1) / 2.0
        j = (Q - C) @ np.asarray(self.v) / self.pv + (self.nv - 1) / 2.0
        return np.stack([i, j], axis=1)

    def pixel_ray(self, i, j) -> tuple[np.ndarray, np.ndarray]:
        """Source position and unit direction toward continuous pixel ``(i, j)``."""
        S, C = np.asarray(self.source), np.asarray(self.det_center)
        D = (C + (i - (self.nu - 1) / 2.0) * self.pu * np.asarray(self.u)
             + (j - (self.nv - 1) / 2.0) * self.pv * np.asarray(self.v))
        d = D - S
        return S, d / np.linalg.norm(d)

    def downsample(self, factor: int) -> "ProjectionGeometry":
        if factor == 1:
            return self
        return ProjectionGeometry(self.source, self.det_center, self.u, self.v,
                                  self.nu // factor, self.nv // factor,
                                  self.pu * factor, self.pv * factor)

    def to_dict(self) -> dict:
        return {"source_mm": list(self.source), "det_center_mm": list(self.det_center),
                "u": list(self.u), "v": list(self.v), "nu": self.nu, "nv": self.nv,
                "pu": self.pu, "pv": self.pv}

    @classmethod
    def from_dict(cls, d) -> "ProjectionGeometry":
        try:
            return cls(d["source_mm"], d["det_center_mm"], d["u"], d["v"], d["nu"], d["nv"], d["pu"], d["pv"])
        except KeyError as exc:
            raise GeometryError(f"geometry missing key {exc}") from None


@dataclass(frozen=True)
class Image2D:
    data: np.ndarray
    pixel_spacing: tuple = (1.0, 1.0)
    mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ImageFormatError(f"image must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ImageFormatError("image contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pixel_spacing", tuple(float(p) for p in self.pixel_spacing))
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != data.shape:
                raise ImageFormatError(f"mask shape {m.shape} != image shape {data.shape}")
            object.__setattr__(self, "mask", m)

    @property
    def dims(self) -> tuple[int, int]:
        """``(nu, nv)``."""
        return self.data.shape[1], self.data.shape[0]

    def with_mask(self, mask) -> "Image2D":
        return Image2D(self.data, self.pixel_spacing, mask)

    def downsample(self, factor: int) -> "Image2D":
        """Coarse image sampled at the coarse pixel centres.

        Values are the mean of the fine pixels nearest each coarse centre (the
        central 2x2 for even factors), which matches a DRR ray-cast on the
        downsampled geometry. A coarse mask pixel is set when any fine pixel of
        its block is.
        """
        if factor == 1:
            return self
        nv, nu = self.data.shape
        h, w = nv // factor, nu // factor
        blocks = self.data[: h * factor, : w * factor].reshape(h, factor, w, factor)
        c = factor // 2
        lo = c - 1 if factor % 2 == 0 else c
        data = blocks[:, lo : c + 1, :, lo : c + 1].mean(axis=(1, 3))
        mask = None if self.mask is None else downsample_mask(self.mask, factor)
        return Image2D(data, tuple(p * factor for p in self.pixel_spacing), mask)


def downsample_mask(mask, factor: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if factor == 1:
        return m
    h, w = m.shape[0] // factor, m.shape[1] // factor
    return m[: h * factor, : w * factor].reshape(h, factor, w, factor).any(axis=(1, 3))


# -- kernel -----------------------------------------------------------------

@numba.njit(cache=True, nogil=True, parallel=True, fastmath=True)
def _raycast(vol, box_lo, inv_sp, rot, shift, src, corner, du, dv, pix_i, pix_j, step):
    """Line integrals for the pixels ``(pix_i[n], pix_j[n])``.

    ``vol`` is (nz+2, ny+2, nx+2, C), x fastest, with a zero border; ``box_lo`` is the world
    position of padded index 0. ``rot``/``shift`` map world points into the
    volume frame; ``corner`` is the world centre of pixel (0, 0). C is 1 or 2.
    """
    nzp, nyp, nxp, nc = vol.shape
    npix = pix_i.shape[0]
    out = np.zeros((nc, npix), dtype=np.float64)
    s0 = rot[0, 0] * src[0] + rot[0, 1] * src[1] + rot[0, 2] * src[2] + shift[0]
    s1 = rot[1, 0] * src[0] + rot[1, 1] * src[1] + rot[1, 2] * src[2] + shift[1]
    s2 = rot[2, 0] * src[0] + rot[2, 1] * src[1] + rot[2, 2] * src[2] + shift[2]
    lo = np.empty(3)
    hi = np.empty(3)
    # support of the unpadded data: padded index in [0, n + 1]
    for a in range(3):
        lo[a] = box_lo[a]
        hi[a] = box_lo[a] + (vol.shape[2 - a] - 1) / inv_sp[a]
    two = nc > 1
    blx, bly, blz = box_lo[0], box_lo[1], box_lo[2]
    isx, isy, isz = inv_sp[0], inv_sp[1], inv_sp[2]
    for n in numba.prange(npix):
        i = pix_i[n]
        j = pix_j[n]
        px = corner[0] + i * du[0] + j * dv[0]
        py = corner[1] + i * du[1] + j * dv[1]
        pz = corner[2] + i * du[2] + j * dv[2]
        wx = px - src[0]
        wy = py - src[1]
        wz = pz - src[2]
        norm = math.sqrt(wx * wx + wy * wy + wz * wz)
        wx /= norm
        wy /= norm
        wz /= norm
        d0 = rot[0, 0] * wx + rot[0, 1] * wy + rot[0, 2] * wz
        d1 = rot[1, 0] * wx + rot[1, 1] * wy + rot[1, 2] * wz
        d2 = rot[2, 0] * wx + rot[2, 1] * wy + rot[2, 2] * wz
        tmin = 0.0
        tmax = norm
        ok = True
        for a in range(3):
            if a == 0:
                o, d = s0, d0
            elif a == 1:
                o, d = s1, d1
            else:
                o, d = s2, d2
            if abs(d) < 1e-15:
                if o <= lo[a] or o >= hi[a]:
                    ok = False
            else:
                ta = (lo[a] - o) / d
                tb = (hi[a] - o) / d
                if ta > tb:
                    ta, tb = tb, ta
                if ta > tmin:
                    tmin = ta
                if tb < tmax:
                    tmax = tb
        if not ok or tmax <= tmin:
            continue
        k0 = int(math.ceil(tmin / step - 0.5))
        k1 = int(math.floor(tmax / step - 0.5))
        acc0 = 0.0
        acc1 = 0.0
        # continuous padded index along the ray: f(t) = g + t * h
        gx = (s0 - blx) * isx
        gy = (s1 - bly) * isy
        gz = (s2 - blz) * isz
        hx = d0 * isx
        hy = d1 * isy
        hz = d2 * isz
        for k in range(k0, k1 + 1):
            t = (k + 0.5) * step
            fx = gx + t * hx
            fy = gy + t * hy
            fz = gz + t * hz
            # the ray is clipped to the padded box, so indices are >= 0 up to rounding
            ix = int(fx)
            iy = int(fy)
            iz = int(fz)
            if ix > nxp - 2:
                ix = nxp - 2
            if iy > nyp - 2:
                iy = nyp - 2
            if iz > nzp - 2:
                iz = nzp - 2
            ax = fx - ix
            ay = fy - iy
            az = fz - iz
            bx = 1.0 - ax
            by = 1.0 - ay
            bz = 1.0 - az
            c00 = bx * vol[iz, iy, ix, 0] + ax * vol[iz, iy, ix + 1, 0]
            c10 = bx * vol[iz, iy + 1, ix, 0] + ax * vol[iz, iy + 1, ix + 1, 0]
            c01 = bx * vol[iz + 1, iy, ix, 0] + ax * vol[iz + 1, iy, ix + 1, 0]
            c11 = bx * vol[iz + 1, iy + 1, ix, 0] + ax * vol[iz + 1, iy + 1, ix + 1, 0]
            acc0 += bz * (by * c00 + ay * c10) + az * (by * c01 + ay * c11)
            if two:
                c00 = bx * vol[iz, iy, ix, 1] + ax * vol[iz, iy, ix + 1, 1]
                c10 = bx * vol[iz, iy + 1, ix, 1] + ax * vol[iz, iy + 1, ix + 1, 1]
                c01 = bx * vol[iz + 1, iy, ix, 1] + ax * vol[iz + 1, iy, ix + 1, 1]
                c11 = bx * vol[iz + 1, iy + 1, ix, 1] + ax * vol[iz + 1, iy + 1, ix + 1, 1]
                acc1 += bz * (by * c00 + ay * c10) + az * (by * c01 + ay * c11)
        out[0, n] = acc0 * step
        if two:
            out[1, n] = acc1 * step
    return out


# -- prepared volumes ---------------------------------------------------------

@dataclass(frozen=True)
class PreparedVolume:
    """Zero-padded, optionally cropped, multi-channel sampling grid."""

    array: np.ndarray  # (nz+2, ny+2, nx+2, C) float32, x fastest
    box_lo: np.ndarray  # world position of padded index 0
    spacing: np.ndarray
    step: float

    @property
    def corners(self) -> np.ndarray:
        """World corners of the trilinear support box (8, 3)."""
        lo = self.box_lo
        hi = self.box_lo + (np.asarray(self.array.shape[2::-1]) - 1) * self.spacing
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def prepare(channels, spacing, origin, crop_to=None, margin: int = 1, step=None) -> PreparedVolume:
    """Stack channel arrays, crop to the bounding box of ``crop_to`` and pad with zeros."""
    chans = [np.asarray(c, dtype=np.float32) for c in channels]
    spacing = np.asarray(spacing, dtype=float)
    origin = np.asarray(origin, dtype=float)
    lo_idx = np.zeros(3, dtype=int)
    hi_idx = np.asarray(chans[0].shape)
    if crop_to is not None:
        nz = np.argwhere(crop_to)
        if len(nz):
            lo_idx = np.maximum(nz.min(axis=0) - margin, 0)
            hi_idx = np.minimum(nz.max(axis=0) + 1 + margin, hi_idx)
    sl = tuple(slice(a, b) for a, b in zip(lo_idx, hi_idx))
    arr = np.stack([c[sl].transpose(2, 1, 0) for c in chans], axis=-1)
    arr = np.pad(arr, ((1, 1), (1, 1), (1, 1), (0, 0)))
    # padded index p corresponds to original index lo_idx + p - 1, whose centre is
    # origin + (lo_idx + p - 0.5) * spacing
    box_lo = origin + (lo_idx - 0.5) * spacing
    if step is None:
        step = float(spacing.min()) / 2.0
    return PreparedVolume(np.ascontiguousarray(arr), box_lo, spacing, float(step))


def prepare_volume(v: Volume, mask: BoneMask3D | None = None, with_mask_channel=False, crop=True, step=None):
    """Sampling grid for ``v`` (restricted to ``mask`` when given).

    With ``with_mask_channel`` a second channel holds the binary mask so one
    pass yields both the DRR and the mask line integral.
    """
    data = v.data
    chans = []
    if mask is not None:
        mask.check_grid(v)
        chans.append(np.where(mask.data, data, 0.0))
        if with_mask_channel:
            chans.append(mask.data.astype(np.float32))
    else:
        chans.append(data)
    crop_to = None
    if crop:
        crop_to = mask.data if mask is not None else data > 0
    return prepare(chans, v.spacing, v.origin, crop_to=crop_to, step=step)


def _pose_inverse(pose: Pose6DoF | None):
    if pose is None:
        return np.eye(3), np.zeros(3)
    m = pose_to_matrix(pose).inverse()
    return m.rotation, m.translation


def footprint(pv: PreparedVolume, pose: Pose6DoF | None, g: ProjectionGeometry, pad: int = 1):
    """Pixel rectangle ``(i0, i1, j0, j1)`` covering the posed volume's support."""
    corners = pv.corners
    if pose is not None:
        corners = pose_to_matrix(pose).apply(corners)
    S = np.asarray(g.source)
    depth = (corners - S) @ g.normal
    if np.any(depth <= 1e-9):
        return 0, g.nu, 0, g.nv
    ij = g.project(corners)
    i0 = max(int(math.floor(ij[:, 0].min())) - pad, 0)
    i1 = min(int(math.ceil(ij[:, 0].max())) + pad + 1, g.nu)
    j0 = max(int(math.floor(ij[:, 1].min())) - pad, 0)
    j1 = min(int(math.ceil(ij[:, 1].max())) + pad + 1, g.nv)
    return i0, max(i1, i0), j0, max(j1, j0)


def _rect_pixels(rect):
    i0, i1, j0, j1 = (int(r) for r in rect)
    jj, ii = np.mgrid[j0:j1, i0:i1]
    return ii.ravel().astype(np.int64), jj.ravel().astype(np.int64)


def raycast_pixels(pv: PreparedVolume, pose: Pose6DoF | None, g: ProjectionGeometry, pix_i, pix_j) -> np.ndarray:
    """Line integrals at integer pixels ``(pix_i, pix_j)``; shape (C, n)."""
    rot, shift = _pose_inverse(pose)
    u, v = np.asarray(g.u), np.asarray(g.v)
    corner = (np.asarray(g.det_center) - (g.nu - 1) / 2.0 * g.pu * u - (g.nv - 1) / 2.0 * g.pv * v)
    return _raycast(pv.array, pv.box_lo, 1.0 / pv.spacing, rot, shift, np.asarray(g.source, float),
                    corner, u * g.pu, v * g.pv, np.asarray(pix_i, np.int64), np.asarray(pix_j, np.int64),
                    pv.step)


def raycast(pv: PreparedVolume, pose: Pose6DoF | None, g: ProjectionGeometry, rect=None) -> np.ndarray:
    """Line integrals over ``rect = (i0, i1, j0, j1)``; shape (C, j1 - j0, i1 - i0)."""
    g.validate()
    if rect is None:
        rect = (0, g.nu, 0, g.nv)
    i0, i1, j0, j1 = (int(r) for r in rect)
    nc = pv.array.shape[3]
    if i1 <= i0 or j1 <= j0:
        return np.zeros((nc, max(j1 - j0, 0), max(i1 - i0, 0)))
    ii, jj = _rect_pixels(rect)
    return raycast_pixels(pv, pose, g, ii, jj).reshape(nc, j1 - j0, i1 - i0)


def render_prepared(pv: PreparedVolume, pose, g: ProjectionGeometry) -> np.ndarray:
    """Full-detector images (C, nv, nu), rendering only the posed footprint."""
    out = np.zeros((pv.array.shape[3], g.nv, g.nu))
    i0, i1, j0, j1 = footprint(pv, pose, g)
    if i1 > i0 and j1 > j0:
        out[:, j0:j1, i0:i1] = raycast(pv, pose, g, (i0, i1, j0, j1))
    return out


def render_drr(v: Volume, pose: Pose6DoF | None, g: ProjectionGeometry, step=None) -> Image2D:
    """DRR of ``v`` moved by ``pose``; pixel values are dimensionless line integrals."""
    pv = prepare_volume(v, step=step)
    return Image2D(render_prepared(pv, pose, g)[0], (g.pu, g.pv))


def mask_threshold(spacing) -> float:
    """Minimum mask chord length (mm) for a pixel to count as covered: half a voxel."""
    return 0.5 * float(np.min(spacing))


def render_mask_projection(m: BoneMask3D, pose: Pose6DoF | None, g: ProjectionGeometry, step=None) -> Image2D:
    """Binary projection: true where the ray's chord through the mask exceeds half a voxel."""
    pv = prepare(
        [m.data.astype(np.float32)], m.spacing, m.origin,
        crop_to=m.data if m.data.any() else None, step=step,
    )
    chord = render_prepared(pv, pose, g)[0]
    covered = chord > mask_threshold(m.spacing)
    return Image2D(covered.astype(np.float64), (g.pu, g.pv), covered)


def add_poisson_noise(img: Image2D, photons: float, seed=None) -> Image2D:
    """Quantum noise on a line-integral image.

    Counts are drawn from Poisson(photons * exp(-L)), clamped to at least one,
    and mapped back through ``-log(counts / photons)``.
    """
    if not photons > 0:
        raise ValueError(f"photon count must be positive, got {photons}")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(photons * np.exp(-img.data)).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    return Image2D(-np.log(counts / photons), img.pixel_spacing, img.mask)


# -- image I/O ----------------------------------------------------------------

def save_image(img: Image2D, path, kind: str = "drr") -> None:
    path = os.fspath(path)
    nv, nu = img.data.shape
    if kind == "mask":
        src = img.mask if img.mask is not None else img.data > 0
        payload = np.asarray(src, dtype="<f4")
    else:
        payload = np.asarray(img.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(payload.tobytes(order="C"))
    header = {"dims": [nu, nv], "pixel_spacing_mm": list(img.pixel_spacing), "kind": kind}
    with open(path + ".json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_image(path) -> Image2D:
    path = os.fspath(path)
    with open(path + ".json") as fh:
        header = json.load(fh)
    nu, nv = (int(d) for d in header["dims"])
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != nu * nv:
        raise ImageFormatError(f"{path}: expected {nu * nv} pixels, found {raw.size}")
    data = raw.reshape(nv, nu).astype(np.float64)
    if header.get("kind") == "mask":
        return Image2D(data, header["pixel_spacing_mm"], data > 0.5)
    return Image2D(data, header["pixel_spacing_mm"])


def save_geometry(g: ProjectionGeometry, path) -> None:
    with open(path, "w") as fh:
        json.dump(g.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_geometry(path) -> ProjectionGeometry:
    with open(path) as fh:
        return ProjectionGeometry.from_dict(json.load(fh))
