"""Rigid 6-DoF poses.

A pose moves a point ``x`` as ``R @ (x - pivot) + pivot + t`` where
``R = Rz(r_gamma) @ Ry(r_beta) @ Rx(r_alpha)`` (intrinsic Z-Y-X order).
Angles are degrees at every interface and radians internally.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

CONVENTION = "ZYX-intrinsic"


class InvalidPoseError(ValueError):
    pass


class PivotMismatchError(ValueError):
    pass


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(r_alpha: float, r_beta: float, r_gamma: float) -> np.ndarray:
    """Rotation matrix for Z-Y-X intrinsic angles given in degrees."""
    a, b, g = np.radians([r_alpha, r_beta, r_gamma])
    return _rot_z(g) @ _rot_y(b) @ _rot_x(a)


def rotation_to_euler(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`euler_to_rotation`; returns (r_alpha, r_beta, r_gamma) in degrees."""
    R = np.asarray(R, dtype=float)
    sb = -R[2, 0]
    sb = min(1.0, max(-1.0, sb))
    beta = math.asin(sb)
    if abs(sb) < 1.0 - 1e-12:
        alpha = math.atan2(R[2, 1], R[2, 2])
        gamma = math.atan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock: fold everything into gamma
        alpha = 0.0
        gamma = math.atan2(-R[0, 1], R[1, 1])
    return math.degrees(alpha), math.degrees(beta), math.degrees(gamma)


def rotation_vector(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector (radians) of a rotation matrix."""
    R = np.asarray(R, dtype=float)
    cos_t = min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0))
    theta = math.acos(cos_t)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-12:
        return 0.5 * w
    if math.pi - theta < 1e-6:
        # near 180 deg the antisymmetric part vanishes; use the symmetric part
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / math.sqrt(max(M[k, k], 1e-300))
        return theta * axis / np.linalg.norm(axis)
    return theta * w / (2.0 * math.sin(theta))


def rotation_from_vector(w) -> np.ndarray:
    """Rodrigues formula; ``w`` is an axis-angle vector in radians."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-15:
        return np.eye(3)
    k = w / theta
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


@dataclass(frozen=True)
class RigidMatrix:
    """Rotation block plus translation, acting as ``x -> R @ x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidMatrix":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_homogeneous(cls, H) -> "RigidMatrix":
        H = np.asarray(H, dtype=float)
        return cls(H[:3, :3], H[:3, 3])

    def homogeneous(self) -> np.ndarray:
        H = np.eye(4)
        H[:3, :3] = self.rotation
        H[:3, 3] = self.translation
        return H

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidMatrix") -> "RigidMatrix":
        return RigidMatrix(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidMatrix":
        Rt = self.rotation.T
        return RigidMatrix(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class Pose6DoF:
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    r_alpha: float = 0.0
    r_beta: float = 0.0
    r_gamma: float = 0.0
    pivot: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        for name in ("tx", "ty", "tz", "r_alpha", "r_beta", "r_gamma"):
            object.__setattr__(self, name, float(getattr(self, name)))
        pivot = tuple(float(c) for c in np.asarray(self.pivot, dtype=float).reshape(3))
        object.__setattr__(self, "pivot", pivot)

    @classmethod
    def from_vector(cls, params, pivot=(0.0, 0.0, 0.0)) -> "Pose6DoF":
        p = np.asarray(params, dtype=float).reshape(6)
        return cls(*p, pivot=pivot)

    @classmethod
    def identity(cls, pivot=(0.0, 0.0, 0.0)) -> "Pose6DoF":
        return cls(pivot=pivot)

    @classmethod
    def from_matrix(cls, m: RigidMatrix, pivot=(0.0, 0.0, 0.0)) -> "Pose6DoF":
        """Parameters of ``m`` expressed about ``pivot``."""
        p = np.asarray(pivot, dtype=float)
        a, b, g = rotation_to_euler(m.rotation)
        t = m.translation - p + m.rotation @ p
        return cls(t[0], t[1], t[2], a, b, g, pivot=p)

    def as_vector(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.r_alpha, self.r_beta, self.r_gamma])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.r_alpha, self.r_beta, self.r_gamma])

    def with_params(self, params) -> "Pose6DoF":
        return Pose6DoF.from_vector(params, pivot=self.pivot)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.as_vector())) or not np.all(np.isfinite(self.pivot)):
            raise InvalidPoseError(f"non-finite pose parameters: {self}")

    def to_dict(self) -> dict:
        return {
            "tx": self.tx,
            "ty": self.ty,
            "tz": self.tz,
            "r_alpha": self.r_alpha,
            "r_beta": self.r_beta,
            "r_gamma": self.r_gamma,
            "pivot": list(self.pivot),
            "convention": CONVENTION,
            "units": {"trans": "mm", "rot": "deg"},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose6DoF":
        conv = d.get("convention", CONVENTION)
        if conv != CONVENTION:
            raise InvalidPoseError(f"unsupported rotation convention {conv!r}")
        units = d.get("units", {"trans": "mm", "rot": "deg"})
        if units.get("trans", "mm") != "mm" or units.get("rot", "deg") != "deg":
            raise InvalidPoseError(f"unsupported pose units {units!r}")
        return cls(
            d["tx"], d["ty"], d["tz"], d["r_alpha"], d["r_beta"], d["r_gamma"],
            pivot=tuple(d.get("pivot", (0.0, 0.0, 0.0))),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "Pose6DoF":
        return cls.from_dict(json.loads(s))


def pose_to_matrix(p: Pose6DoF) -> RigidMatrix:
    """Rotate about the pivot in Z-Y-X intrinsic order, then translate."""
    p.validate()
    R = euler_to_rotation(p.r_alpha, p.r_beta, p.r_gamma)
    c = np.asarray(p.pivot)
    return RigidMatrix(R, c - R @ c + p.translation)


def apply_pose(p: Pose6DoF, points) -> np.ndarray:
    """Map one point (shape (3,)) or many (shape (n, 3)) through ``p``."""
    return pose_to_matrix(p).apply(points)


def compose(a: Pose6DoF, b: Pose6DoF, pivot=None) -> Pose6DoF:
    """Pose whose matrix is ``matrix(a) @ matrix(b)``, expressed about ``pivot`` (default a's)."""
    m = pose_to_matrix(a) @ pose_to_matrix(b)
    return Pose6DoF.from_matrix(m, pivot=a.pivot if pivot is None else pivot)


def invert(p: Pose6DoF) -> Pose6DoF:
    return Pose6DoF.from_matrix(pose_to_matrix(p).inverse(), pivot=p.pivot)


def wrap_angle_error(d):
    """Absolute angular difference folded into [0, 180] degrees."""
    d = np.abs(np.mod(np.asarray(d, dtype=float), 360.0))
    return np.minimum(d, 360.0 - d)


def pose_difference(a: Pose6DoF, b: Pose6DoF) -> np.ndarray:
    """Per-axis absolute errors (mm, mm, mm, deg, deg, deg)."""
    if not np.allclose(a.pivot, b.pivot, rtol=0.0, atol=1e-9):
        raise PivotMismatchError(f"pivots differ: {a.pivot} vs {b.pivot}")
    d = a.as_vector() - b.as_vector()
    out = np.abs(d)
    out[3:] = wrap_angle_error(d[3:])
    return out
