"""Affordance metric over gripper poses and re-ranking of externally proposed grasps."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from functools import cmp_to_key

import numpy as np

from .scene import GaussianScene, quat_to_rotmat, rotmat_to_quat

NU_TIE_TOL = 1e-6


class GraspFileError(ValueError):
    pass


@dataclass
class GraspCandidate:
    """Gripper pose in world coordinates: approach along the gripper +z, jaws closing along +x."""

    rotation: np.ndarray
    translation: np.ndarray
    score: float = 0.0
    width: float = 0.08

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if not np.all(np.isfinite(R)) or np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise ValueError("grasp rotation is not a proper orthonormal matrix")
        if self.width <= 0:
            raise ValueError("grasp width must be positive")

    @property
    def quat(self) -> np.ndarray:
        return rotmat_to_quat(self.rotation)

    @property
    def approach(self) -> np.ndarray:
        return self.rotation[:, 2]


@dataclass
class GripperROI:
    depth: float = 0.04
    height: float = 0.02

    def __post_init__(self):
        if self.depth <= 0 or self.height <= 0:
            raise ValueError("ROI dimensions must be positive")


@dataclass
class Affordance:
    nu: float
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


def roi_members(points, cand: GraspCandidate, roi: GripperROI) -> np.ndarray:
    """Boolean mask of points inside the closing-volume box (bounds inclusive)."""
    local = (np.asarray(points, dtype=np.float64) - cand.translation) @ cand.rotation
    half = np.array([cand.width / 2, roi.height / 2, roi.depth / 2])
    return np.all(np.abs(local) <= half, axis=1)


def affordance_at_pose(scene: GaussianScene, cand: GraspCandidate, roi: GripperROI | None = None,
                       selection=None) -> Affordance:
    """nu = sum(alpha * beta) / sum(alpha) over Gaussians whose means lie in the ROI; 0 if empty."""
    roi = roi or GripperROI()
    idx = np.arange(len(scene)) if selection is None else np.asarray(selection, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("selection is empty")
    inside = idx[roi_members(scene.means[idx], cand, roi)]
    if len(inside) == 0:
        return Affordance(0.0, 0)
    a = scene.opacities[inside]
    b = scene.affordances[inside]
    return Affordance(float(np.sum(a * b) / np.sum(a)), len(inside))


@dataclass
class RankedGrasp:
    candidate: GraspCandidate
    nu: float
    index: int
    roi_count: int


def _compare(x: RankedGrasp, y: RankedGrasp) -> int:
    if abs(x.nu - y.nu) >= NU_TIE_TOL:
        return -1 if x.nu > y.nu else 1
    if x.candidate.score != y.candidate.score:
        return -1 if x.candidate.score > y.candidate.score else 1
    return -1 if x.index < y.index else (1 if x.index > y.index else 0)


def rank_candidates(candidates, scene: GaussianScene, roi: GripperROI | None = None, selection=None,
                    approach_axis=None, max_angle_deg: float | None = None) -> list[RankedGrasp]:
    """Sort by nu (descending), then proposer score (descending), then input index.

    With ``approach_axis`` and ``max_angle_deg``, candidates whose approach direction deviates
    by more than the angle are dropped first.
    """
    roi = roi or GripperROI()
    rows = []
    for i, c in enumerate(candidates):
        if approach_axis is not None and max_angle_deg is not None:
            ax = np.asarray(approach_axis, dtype=np.float64)
            cosang = float(c.approach @ ax / np.linalg.norm(ax))
            if np.degrees(np.arccos(np.clip(cosang, -1, 1))) > max_angle_deg:
                continue
        a = affordance_at_pose(scene, c, roi, selection)
        rows.append(RankedGrasp(c, a.nu, i, a.count))
    return sorted(rows, key=cmp_to_key(_compare))


def load_candidates(path) -> list[GraspCandidate]:
    """Parse ``qw,qx,qy,qz,tx,ty,tz,score,width`` rows (an optional header line is skipped)."""
    out = []
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(x) for x in row]
            except ValueError:
                if n == 1 and row[0].strip().lower() == "qw":
                    continue
                raise GraspFileError(f"{path}:{n}: cannot parse {row!r}") from None
            if len(vals) < 9:
                raise GraspFileError(f"{path}:{n}: expected 9 columns, got {len(vals)}")
            q = np.array(vals[:4])
            norm = np.linalg.norm(q)
            if norm == 0 or not np.isfinite(norm):
                raise GraspFileError(f"{path}:{n}: degenerate quaternion")
            if abs(norm - 1) > 1e-2:
                warnings.warn(f"{path}:{n}: quaternion norm {norm:.4f} renormalized", stacklevel=2)
            try:
                out.append(GraspCandidate(quat_to_rotmat(q / norm), vals[4:7], vals[7], vals[8]))
            except ValueError as exc:
                raise GraspFileError(f"{path}:{n}: {exc}") from None
    return out


def write_candidates(path, candidates) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["qw", "qx", "qy", "qz", "tx", "ty", "tz", "score", "width"])
        for c in candidates:
            w.writerow([repr(float(v)) for v in (*c.quat, *c.translation, c.score, c.width)])


def write_ranked(path, ranked) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "index", "qw", "qx", "qy", "qz", "tx", "ty", "tz", "score", "width", "nu", "roi_count"])
        for r, g in enumerate(ranked):
            c = g.candidate
            w.writerow([r, g.index, *(f"{float(v):.9g}" for v in (*c.quat, *c.translation, c.score, c.width)),
                        f"{g.nu:.9g}", g.roi_count])


def grasp_from_approach(position, approach, closing, score: float = 0.0, width: float = 0.08) -> GraspCandidate:
    """Build a candidate whose +z is ``approach`` and +x is ``closing`` (orthogonalized)."""
    z = np.asarray(approach, dtype=np.float64)
    z = z / np.linalg.norm(z)
    x = np.asarray(closing, dtype=np.float64)
    x = x - z * (x @ z)
    x /= np.linalg.norm(x)
    return GraspCandidate(np.column_stack([x, np.cross(z, x), z]), position, score, width)

