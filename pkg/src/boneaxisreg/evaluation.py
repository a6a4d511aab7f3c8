"""Registration scoring: per-axis errors, TRE, success rate and summaries."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import PivotMismatchError, Pose6DoF, apply_pose, pose_difference
from .volume import BoneMask3D, EmptySegmentationError, mask_to_pointcloud

DEFAULT_MAX_POINTS = 10000
AXES = ("tx", "ty", "tz", "r_alpha", "r_beta", "r_gamma")
COLUMNS = ("t_x(mm)", "t_y(mm)", "t_z(mm)", "r_a(deg)", "r_b(deg)", "r_g(deg)", "TRE(mm)", "RSR(%)")


def _points(mask, max_points):
    if isinstance(mask, BoneMask3D):
        return mask_to_pointcloud(mask, max_points)
    pts = np.asarray(mask, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptySegmentationError("no points to score")
    return pts


def compute_tre(gt: Pose6DoF, est: Pose6DoF, mask, max_points: int | None = DEFAULT_MAX_POINTS) -> float:
    """Mean distance between mask points mapped by ``est`` and by ``gt`` (mm).

    ``mask`` is a :class:`BoneMask3D` (sampled with a deterministic stride
    down to ``max_points``) or an explicit ``(n, 3)`` point array.
    """
    if not np.allclose(gt.pivot, est.pivot, atol=1e-9):
        raise PivotMismatchError(f"pivots differ: {gt.pivot} vs {est.pivot}")
    pts = _points(mask, max_points)
    return float(np.linalg.norm(apply_pose(est, pts) - apply_pose(gt, pts), axis=1).mean())


def success(tre: float, threshold: float) -> bool:
    """A trial succeeds when its TRE is at most ``threshold`` (inclusive)."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    return bool(tre <= threshold)


@dataclass(frozen=True)
class TrialRecord:
    gt: Pose6DoF
    est: Pose6DoF
    bone: str
    tre: float
    axis_errors: tuple
    threshold: float
    success: bool

    @classmethod
    def score(cls, gt: Pose6DoF, est: Pose6DoF, mask, threshold: float = 1.5, bone: str | None = None,
              max_points: int | None = DEFAULT_MAX_POINTS) -> "TrialRecord":
        tre = compute_tre(gt, est, mask, max_points)
        err = np.abs(pose_difference(est, gt))
        name = bone or getattr(mask, "label", "bone")
        return cls(gt, est, name, tre, tuple(float(e) for e in err), float(threshold), success(tre, threshold))

    def to_dict(self) -> dict:
        return {"bone": self.bone, "gt": self.gt.to_dict(), "est": self.est.to_dict(), "tre_mm": self.tre,
                "axis_errors": dict(zip(AXES, self.axis_errors)), "threshold_mm": self.threshold,
                "success": self.success}


@dataclass(frozen=True)
class MetricSummary:
    tx: float
    ty: float
    tz: float
    r_alpha: float
    r_beta: float
    r_gamma: float
    tre: float
    rsr: float
    m_trans: float
    m_rot: float
    count: int
    threshold: float
    median_tre: float

    def row(self) -> list:
        return [self.tx, self.ty, self.tz, self.r_alpha, self.r_beta, self.r_gamma, self.tre, self.rsr]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self, label: str = "BoneAxis-Reg") -> str:
        return format_table({label: self})


def summarize(trials, threshold: float | None = None, failed: int = 0) -> MetricSummary:
    """Per-axis mean absolute errors, mean TRE, RSR, mTrans and mRot.

    mTrans and mRot are the means of the three translation and the three
    rotation per-axis means. ``threshold`` re-scores success; by default each
    record's own flag is used. ``failed`` counts trials that produced no
    pose: they enter the success-rate denominator and the trial count only.
    """
    trials = list(trials)
    if not trials:
        raise ValueError("no trials to summarize")
    if threshold is None:
        threshold = trials[0].threshold
        ok = [t.success for t in trials]
    else:
        ok = [success(t.tre, threshold) for t in trials]
    E = np.array([t.axis_errors for t in trials], dtype=float)
    means = E.mean(axis=0)
    tres = np.array([t.tre for t in trials])
    return MetricSummary(
        *(float(m) for m in means),
        tre=float(tres.mean()),
        rsr=100.0 * sum(ok) / (len(trials) + failed),
        m_trans=float(means[:3].mean()),
        m_rot=float(means[3:].mean()),
        count=len(trials) + failed,
        threshold=float(threshold),
        median_tre=float(np.median(tres)),
    )


def format_table(rows: dict) -> str:
    """Aligned text table, one line per labelled summary.

    Numbers are written in shortest round-trip form so the table carries
    the summary values exactly.
    """
    cells = {label: [repr(float(x)) for x in s.row()] for label, s in rows.items()}
    lw = max([len("method")] + [len(k) for k in rows])
    widths = [max([len(c)] + [len(r[i]) for r in cells.values()]) + 2 for i, c in enumerate(COLUMNS)]
    head = "method".ljust(lw) + "".join(c.rjust(w) for c, w in zip(COLUMNS, widths))
    lines = [head, "-" * len(head)]
    for label, r in cells.items():
        lines.append(label.ljust(lw) + "".join(c.rjust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> dict:
    """Read back :func:`format_table` output into label -> list of floats."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    out = {}
    for ln in lines[2:]:
        parts = ln.split()
        n = len(COLUMNS)
        out[" ".join(parts[:-n])] = [float(x) for x in parts[-n:]]
    return out


def save_summary(summary: MetricSummary, json_path, table_path=None, label: str = "BoneAxis-Reg") -> None:
    with open(json_path, "w") as fh:
        fh.write(summary.to_json())
    if table_path is not None:
        with open(table_path, "w") as fh:
            fh.write(summary.table(label))
