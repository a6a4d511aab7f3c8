"""Tibiofemoral kinematics from registered poses.

The tibial plateau plane is fitted through three posed plateau landmarks.
For each frame the lowest point of each femoral condyle (along the plane
normal) gives a condyle-to-plateau distance and a 2-D projection point in
plateau coordinates.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose6DoF, apply_pose, euler_to_rotation
from .volume import BoneMask3D, EmptySegmentationError

MALALIGNMENT_MM = 2.0
PRE_TKA_OFFSET_MM = 9.0
CONDYLE_REGION_MM = 15.0
MODES = ("post-TKA", "pre-TKA")
CSV_COLUMNS = ("frame", "extension_deg", "medial_mm", "lateral_mm", "MLD_mm", "med_px", "med_py", "lat_px", "lat_py")


class DegeneratePlaneError(ValueError):
    pass


@dataclass(frozen=True)
class PlateauPlane:
    anchor: np.ndarray
    normal: np.ndarray
    medial_axis: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, float)
        m = np.asarray(self.medial_axis, float)
        if abs(np.linalg.norm(n) - 1) > 1e-9 or abs(np.linalg.norm(m) - 1) > 1e-9 or abs(n @ m) > 1e-9:
            raise ValueError("plane normal and medial axis must be orthonormal")
        object.__setattr__(self, "anchor", np.asarray(self.anchor, float))
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "medial_axis", m)

    @property
    def secondary_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.medial_axis)

    def signed_distance(self, points) -> np.ndarray:
        return (np.asarray(points, float) - self.anchor) @ self.normal

    def coords2d(self, points) -> np.ndarray:
        d = np.asarray(points, float) - self.anchor
        return np.stack([d @ self.medial_axis, d @ self.secondary_axis], axis=-1)

    def to_dict(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)] for k in ("anchor", "normal", "medial_axis")}


def fit_plateau_plane(tibia_pose: Pose6DoF, landmarks: dict, mode: str = "post-TKA") -> PlateauPlane:
    """Plane through the posed medial, lateral and anterior plateau landmarks.

    The normal follows the right-hand rule on (lateral - medial, anterior -
    medial); when the landmarks carry ``plateau_normal`` the sign is matched
    to its posed direction. ``pre-TKA`` mode shifts the anchor 9 mm along
    minus the normal.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    M, L, A = (apply_pose(tibia_pose, np.asarray(landmarks[k], float))
               for k in ("plateau_medial", "plateau_lateral", "plateau_anterior"))
    n = np.cross(L - M, A - M)
    scale = np.linalg.norm(L - M) * np.linalg.norm(A - M)
    if scale == 0 or np.linalg.norm(n) <= 1e-9 * scale:
        raise DegeneratePlaneError("plateau landmarks are collinear")
    n /= np.linalg.norm(n)
    if "plateau_normal" in landmarks:
        up = euler_to_rotation(*tibia_pose.angles) @ np.asarray(landmarks["plateau_normal"], float)
        if n @ up < 0:
            n = -n
    med = M - L
    med = med - (med @ n) * n
    med /= np.linalg.norm(med)
    anchor = (M + L + A) / 3.0
    if mode == "pre-TKA":
        anchor = anchor - PRE_TKA_OFFSET_MM * n
    return PlateauPlane(anchor, n, med)


def condyle_regions(femur: BoneMask3D, landmarks: dict, radius: float = CONDYLE_REGION_MM) -> dict:
    """Femur voxel centres within ``radius`` of each condyle landmark."""
    idx = np.argwhere(femur.data)
    pts = np.asarray(femur.origin) + (idx + 0.5) * np.asarray(femur.spacing)
    out = {}
    for side in ("medial", "lateral"):
        c = np.asarray(landmarks[f"{side}_condyle_center"], float)
        sel = pts[np.linalg.norm(pts - c, axis=1) <= radius]
        if sel.shape[0] == 0:
            raise EmptySegmentationError(f"{side} condyle region is empty")
        out[side] = sel
    return out


def condyle_distances(femur_pose: Pose6DoF, plane: PlateauPlane, regions: dict):
    """Signed distances of the lowest medial and lateral condyle points.

    Returns ``(medial_mm, lateral_mm, points)`` where ``points`` maps each
    side to the plateau 2-D coordinates of its lowest point.
    """
    dist, pts = {}, {}
    for side in ("medial", "lateral"):
        region = np.asarray(regions[side], float)
        if region.size == 0:
            raise EmptySegmentationError(f"{side} condyle region is empty")
        posed = apply_pose(femur_pose, region)
        d = plane.signed_distance(posed)
        k = int(np.argmin(d))
        dist[side] = float(d[k])
        pts[side] = plane.coords2d(posed[k])
    return dist["medial"], dist["lateral"], pts


def _direction(axis) -> np.ndarray:
    d = np.asarray(getattr(axis, "direction", axis), float)
    return d / np.linalg.norm(d)


def extension_angle(femur_pose: Pose6DoF, tibia_pose: Pose6DoF, femur_axis) -> float:
    """Flexion of the femur relative to the tibia, in degrees.

    The angle between the femoral shaft axis expressed in the tibia's frame
    and the same axis at neutral; 0 when both bones share a pose.
    """
    a = _direction(femur_axis)
    Rf = euler_to_rotation(*femur_pose.angles)
    Rt = euler_to_rotation(*tibia_pose.angles)
    b = Rt.T @ Rf @ a
    c = float(np.clip(a @ b, -1.0, 1.0))
    s = float(np.linalg.norm(np.cross(a, b)))
    return float(np.degrees(np.arctan2(s, c)))


@dataclass(frozen=True)
class ContactSample:
    frame: int
    medial_mm: float
    lateral_mm: float
    medial_point: tuple
    lateral_point: tuple
    extension_deg: float

    @property
    def mld(self) -> float:
        return self.medial_mm - self.lateral_mm


@dataclass
class KinematicReport:
    samples: list
    mld: np.ndarray = field(init=False)
    ddv: float = field(init=False)
    max_abs_mld: float = field(init=False)
    malaligned: bool = field(init=False)
    threshold_mm: float = MALALIGNMENT_MM

    def __post_init__(self):
        if not self.samples:
            raise ValueError("report needs at least one frame")
        self.mld = np.array([s.medial_mm - s.lateral_mm for s in self.samples])
        self.ddv = float(np.var(self.mld))
        self.max_abs_mld = float(np.max(np.abs(self.mld)))
        self.malaligned = self.max_abs_mld > self.threshold_mm

    @property
    def linkage(self) -> list:
        """Ordered medial-to-lateral segments, one per frame."""
        return [(tuple(s.medial_point), tuple(s.lateral_point)) for s in self.samples]

    def summary(self) -> dict:
        return {
            "frames": [s.frame for s in self.samples],
            "mld_mm": [float(x) for x in self.mld],
            "ddv_mm2": self.ddv,
            "max_abs_mld_mm": self.max_abs_mld,
            "malalignment_threshold_mm": self.threshold_mm,
            "malaligned": self.malaligned,
            "linkage": [[list(map(float, m)), list(map(float, lat))] for m, lat in self.linkage],
        }

    def rows(self) -> list:
        return [
            [s.frame, s.extension_deg, s.medial_mm, s.lateral_mm, float(m),
             float(s.medial_point[0]), float(s.medial_point[1]),
             float(s.lateral_point[0]), float(s.lateral_point[1])]
            for s, m in zip(self.samples, self.mld)
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows():
                w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _frame_poses(sequence):
    """Yield ``(frame, femur_pose, tibia_pose)`` for frames where both succeeded."""
    frames = getattr(sequence, "frames", sequence)
    for n, fr in enumerate(frames):
        if hasattr(fr, "bones"):
            fb, tb = fr.bones.get("femur"), fr.bones.get("tibia_fibula")
            if fb is None or tb is None or not (fb.ok and tb.ok):
                continue
            yield fr.frame, fb.pose, tb.pose
        else:
            if fr.get("femur") is None or fr.get("tibia_fibula") is None:
                continue
            yield n, fr["femur"], fr["tibia_fibula"]


def build_report(sequence, landmarks: dict, regions: dict, femur_axis, mode: str = "post-TKA",
                 threshold_mm: float = MALALIGNMENT_MM) -> KinematicReport:
    """Per-frame contact samples for a registered sequence.

    ``sequence`` is a :class:`~boneaxisreg.registration.SequenceResult` or a
    list of bone-name -> pose dicts. Frames where the femur or tibia failed
    are skipped.
    """
    samples = []
    for n, fp, tp in _frame_poses(sequence):
        plane = fit_plateau_plane(tp, landmarks, mode)
        med, lat, pts = condyle_distances(fp, plane, regions)
        samples.append(ContactSample(n, med, lat, tuple(pts["medial"]), tuple(pts["lateral"]),
                                     extension_angle(fp, tp, femur_axis)))
    if not samples:
        raise ValueError("no successfully registered frames")
    return KinematicReport(samples, threshold_mm=threshold_mm)
