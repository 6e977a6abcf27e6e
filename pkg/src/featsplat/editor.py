"""Selection growing, outlier filtering, rigid edits, hole infilling and point-cloud export."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .imageio import write_featf1
from .scene import (GaussianScene, export_ply, logit, normalize_quat, quat_multiply, quat_to_rotmat,
                    rotmat_to_quat, sigmoid)
from .sh import SH_C0, rotate_sh

log = logging.getLogger(__name__)


class EditWarning(UserWarning):
    pass


def _index_array(selection, n: int) -> np.ndarray:
    idx = np.unique(np.asarray(selection, dtype=np.int64).ravel())
    if len(idx) and (idx[0] < 0 or idx[-1] >= n):
        raise IndexError(f"selection index out of range for a scene of {n} Gaussians")
    return idx


def base_colors(scene: GaussianScene) -> np.ndarray:
    """View-independent (degree-0) color in [0, 1]."""
    return np.clip(scene.sh[:, 0, :] * SH_C0 + 0.5, 0.0, 1.0)


def feature_points_7d(scene: GaussianScene, scores=None) -> np.ndarray:
    """(position - centroid) / extent, degree-0 color and relevancy score per Gaussian."""
    n = len(scene)
    if n == 0:
        return np.zeros((0, 7))
    extent = scene.extent if scene.extent > 0 else 1.0
    pos = (scene.means - scene.means.mean(axis=0)) / extent
    s = np.zeros(n) if scores is None else np.asarray(scores, dtype=np.float64).reshape(n)
    pts = np.column_stack([pos, base_colors(scene), s])
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite 7D feature point")
    return pts


def sq_dist(a, b) -> np.ndarray:
    """Squared Euclidean distances between rows of a (N x D) and a single row b, summed axis by axis."""
    d = np.zeros(len(a))
    for k in range(a.shape[1]):
        d += (a[:, k] - b[k]) ** 2
    return d


def densify_selection(scene: GaussianScene, seed_mask, radius: float, scores=None, points=None) -> np.ndarray:
    """Seeds plus every Gaussian within ``radius`` (7D Euclidean) of some seed."""
    seeds = _index_array(seed_mask, len(scene))
    if len(seeds) == 0:
        raise ValueError("seed mask is empty")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    pts = feature_points_7d(scene, scores) if points is None else np.asarray(points, dtype=np.float64)
    tree = cKDTree(pts)
    # slightly widened tree query, then an exact squared-distance test decides membership
    pad = radius * (1 + 1e-9) + 1e-12
    hits = tree.query_ball_point(pts[seeds], pad)
    cand = np.unique(np.concatenate([np.asarray(h, dtype=np.int64) for h in hits] + [seeds]))
    r2 = radius * radius
    keep = np.zeros(len(pts), dtype=bool)
    keep[seeds] = True
    ctree_seeds = pts[seeds]
    for c in cand[~keep[cand]]:
        if np.any(sq_dist(ctree_seeds, pts[c]) <= r2):
            keep[c] = True
    return np.flatnonzero(keep)


def remove_outliers(selection, scene: GaussianScene, k: int = 10, sigma_mult: float = 2.0,
                    min_ratio: float = 2.0) -> np.ndarray:
    """Statistical filter on the mean 3D distance to the k nearest selected neighbours.

    A point is dropped when its mean distance exceeds both mu + sigma_mult * sigma and
    ``min_ratio`` times the median mean distance; the second bound keeps regular
    layouts (where sigma is ~0 and edge points are only mildly farther) intact.
    """
    sel = _index_array(selection, len(scene))
    if len(sel) <= k:
        warnings.warn(f"selection of {len(sel)} points is too small for k={k}; unchanged", EditWarning,
                      stacklevel=2)
        return sel
    pts = scene.means[sel]
    d, _ = cKDTree(pts).query(pts, k=k + 1)
    mean_d = d[:, 1:].mean(axis=1)
    mu, sd = mean_d.mean(), mean_d.std()
    thresh = max(mu + sigma_mult * sd, min_ratio * np.median(mean_d))
    return sel[mean_d <= thresh]


@dataclass
class RigidMotion:
    """Rotation (unit quaternion w, x, y, z) followed by translation: x -> R x + t.

    ``sequence`` optionally holds a time-parameterised path [(t, quat, translation), ...].
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sequence: list = field(default_factory=list)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            q = normalize_quat(q)
        self.rotation = q
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        times = [s[0] for s in self.sequence]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("sequence times must be strictly increasing")

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.rotation == [1, 0, 0, 0]) and not np.any(self.translation))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T) -> "RigidMotion":
        T = np.asarray(T, dtype=np.float64).reshape(4, 4)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def translate(cls, t) -> "RigidMotion":
        return cls(translation=t)

    def inverse(self) -> "RigidMotion":
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidMotion(q, -(quat_to_rotmat(q) @ self.translation))

    def compose(self, other: "RigidMotion") -> "RigidMotion":
        """self after other."""
        q = normalize_quat(quat_multiply(self.rotation, other.rotation))
        return RigidMotion(q, self.R @ other.translation + self.translation)

    def apply_points(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.R.T + self.translation

    def at(self, t: float) -> "RigidMotion":
        """Pose of the sequence at time t (slerp / lerp between keyframes, clamped at the ends)."""
        if not self.sequence:
            return self
        times = np.array([s[0] for s in self.sequence])
        if t <= times[0]:
            return RigidMotion(self.sequence[0][1], self.sequence[0][2])
        if t >= times[-1]:
            return RigidMotion(self.sequence[-1][1], self.sequence[-1][2])
        j = int(np.searchsorted(times, t)) - 1
        (t0, q0, p0), (t1, q1, p1) = self.sequence[j], self.sequence[j + 1]
        u = (t - t0) / (t1 - t0)
        return RigidMotion(_slerp(np.asarray(q0, float), np.asarray(q1, float), u),
                           (1 - u) * np.asarray(p0, float) + u * np.asarray(p1, float))


def _slerp(q0, q1, u):
    q0, q1 = normalize_quat(q0), normalize_quat(q1)
    d = float(q0 @ q1)
    if d < 0:
        q1, d = -q1, -d
    if d > 0.9995:
        return normalize_quat(q0 + u * (q1 - q0))
    th = np.arccos(d)
    return (np.sin((1 - u) * th) * q0 + np.sin(u * th) * q1) / np.sin(th)


def apply_transform(scene: GaussianScene, selection, xi: RigidMotion) -> GaussianScene:
    """Move the selected Gaussians rigidly (in place); returns the scene for chaining."""
    sel = _index_array(selection, len(scene))
    if xi.is_identity or len(sel) == 0:
        return scene
    R = xi.R
    scene.means[sel] = scene.means[sel] @ R.T + xi.translation
    q = quat_multiply(xi.rotation, scene.quats[sel])
    scene.quats[sel] = q / np.linalg.norm(q, axis=1, keepdims=True)
    if scene.sh_degree > 0 and not np.array_equal(R, np.eye(3)):
        scene.sh[sel] = rotate_sh(scene.sh[sel], R)
    return scene


def load_trajectory(path) -> list:
    """CSV rows ``t, m00, m01, ..., m33`` (row-major 4x4 pose); returns [(t, 4x4)] sorted as given."""
    rows = []
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                vals = [float(x) for x in row]
            except ValueError:
                if n == 1:
                    continue  # header
                raise
            if len(vals) != 17:
                raise ValueError(f"{path}:{n}: expected 17 columns, got {len(vals)}")
            rows.append((vals[0], np.array(vals[1:]).reshape(4, 4)))
    times = [r[0] for r in rows]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError(f"{path}: times must be strictly increasing")
    return rows


def trajectory_motions(poses) -> list:
    """Relative motions between consecutive end-effector poses: T_{k+1} T_k^-1."""
    out = []
    for (_, a), (_, b) in zip(poses, poses[1:]):
        out.append(RigidMotion.from_matrix(b @ np.linalg.inv(a)))
    return out


def apply_trajectory(scene: GaussianScene, selection, poses) -> GaussianScene:
    for m in trajectory_motions(poses):
        apply_transform(scene, selection, m)
    return scene


@dataclass
class InfillParams:
    k_plane: int = 30
    k_interp: int = 5
    min_support: int = 3
    spacing: float | None = None
    search_radius: float | None = None
    idw_power: float = 2.0


def _plane_frame(pts):
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c)
    return c, vt[0], vt[1], vt[2]


def _max_angular_gap(angles) -> float:
    a = np.sort(np.mod(angles, 2 * np.pi))
    gaps = np.diff(np.concatenate([a, [a[0] + 2 * np.pi]]))
    return float(gaps.max())


def infill_footprint(scene: GaussianScene, footprint, params: InfillParams | None = None, exclude=()):
    """Fill the region covered by ``footprint`` points with interpolated Gaussians.

    Support comes from the scene minus ``exclude``. Returns (new scene, inserted indices).
    """
    params = params or InfillParams()
    footprint = np.asarray(footprint, dtype=np.float64).reshape(-1, 3)
    empty = np.zeros(0, dtype=np.int64)
    if len(footprint) == 0:
        return scene, empty
    excl = np.zeros(len(scene), dtype=bool)
    excl[_index_array(exclude, len(scene))] = True
    support_idx = np.flatnonzero(~excl)
    if len(support_idx) == 0:
        warnings.warn("no remaining Gaussians to infill from", EditWarning, stacklevel=2)
        return scene, empty
    fp_center = footprint.mean(axis=0)
    fp_radius = float(np.max(np.linalg.norm(footprint - fp_center, axis=1)))
    sup_pts = scene.means[support_idx]
    d_fp, _ = cKDTree(footprint).query(sup_pts)
    if params.search_radius is not None:
        search = params.search_radius
    else:
        sup_scale = float(np.median(np.exp(scene.log_scales[support_idx]).max(axis=1)))
        search = fp_radius + 10.0 * sup_scale
    near = np.flatnonzero(d_fp <= search)
    if len(near) < params.min_support:
        warnings.warn("no remaining neighbours within the search radius; nothing inserted", EditWarning,
                      stacklevel=2)
        return scene, empty
    near = near[np.argsort(d_fp[near], kind="stable")[:params.k_plane]]
    plane_idx = support_idx[near]
    P = scene.means[plane_idx]
    c, e1, e2, _ = _plane_frame(P)
    spacing = params.spacing or float(np.median(np.exp(scene.log_scales[plane_idx]).max(axis=1)))
    to2d = lambda X: np.column_stack([(X - c) @ e1, (X - c) @ e2])  # noqa: E731
    fp2 = to2d(footprint)
    sup2 = to2d(P)
    lo, hi = fp2.min(axis=0), fp2.max(axis=0)
    us = np.arange(lo[0], hi[0] + 0.5 * spacing, spacing)
    vs = np.arange(lo[1], hi[1] + 0.5 * spacing, spacing)
    grid = np.array([(u, v) for u in us for v in vs]).reshape(-1, 2)
    if len(footprint) > 1:
        fp_gap = float(np.median(cKDTree(fp2).query(fp2, k=2)[0][:, 1]))
    else:
        fp_gap = spacing
    d_grid, _ = cKDTree(fp2).query(grid)
    grid = grid[d_grid <= max(fp_gap, spacing)]
    # interpolation only: a sample needs >= min_support plane points around it on all sides
    keep = []
    reach = fp_radius + 2.0 * spacing
    for g in grid:
        dv = sup2 - g
        dist = np.hypot(dv[:, 0], dv[:, 1])
        m = dist <= reach
        if m.sum() >= params.min_support and _max_angular_gap(np.arctan2(dv[m, 1], dv[m, 0])) < np.pi:
            keep.append(g)
    if not keep:
        warnings.warn("no infill sample is surrounded by support; nothing inserted", EditWarning, stacklevel=2)
        return scene, empty
    grid = np.array(keep)
    new_means = c + grid[:, :1] * e1 + grid[:, 1:2] * e2
    new = _interpolate_attributes(scene, support_idx, new_means, params)
    start = len(scene)
    out = scene.append(new)
    return out, np.arange(start, len(out))


def _interpolate_attributes(scene, support_idx, new_means, params: InfillParams) -> GaussianScene:
    k = min(params.k_interp, len(support_idx))
    d, j = cKDTree(scene.means[support_idx]).query(new_means, k=k)
    d = d.reshape(len(new_means), k)
    j = support_idx[j.reshape(len(new_means), k)]
    w = 1.0 / np.maximum(d, 1e-12) ** params.idw_power
    w /= w.sum(axis=1, keepdims=True)

    def avg(a):
        return np.einsum("nk,nk...->n...", w, a[j])

    return GaussianScene(
        new_means, avg(scene.log_scales), scene.quats[j[:, 0]], logit(np.clip(avg(sigmoid(scene.opacity_logits)),
                                                                                1e-6, 1 - 1e-6)),
        avg(scene.sh), avg(scene.latents), logit(np.clip(avg(sigmoid(scene.aff_logits)), 1e-6, 1 - 1e-6)),
        sh_degree=scene.sh_degree, extent=scene.extent)


def infill_region(scene: GaussianScene, removed_selection, params: InfillParams | None = None):
    """Delete ``removed_selection`` and infill its footprint.

    Returns (new scene, indices of inserted Gaussians in the new scene). The survivors keep
    their relative order; inserted Gaussians are appended.
    """
    sel = _index_array(removed_selection, len(scene))
    if len(sel) == 0:
        return scene.copy(), np.zeros(0, dtype=np.int64)
    footprint = scene.means[sel].copy()
    return infill_footprint(scene.remove(sel), footprint, params)


def vacated_footprint(before: np.ndarray, after: np.ndarray, tol: float) -> np.ndarray:
    """Points of ``before`` with no point of ``after`` within ``tol``."""
    before = np.asarray(before, dtype=np.float64).reshape(-1, 3)
    if len(after) == 0:
        return before
    d, _ = cKDTree(np.asarray(after, dtype=np.float64).reshape(-1, 3)).query(before)
    return before[d > tol]


def move_and_infill(scene: GaussianScene, selection, xi: RigidMotion, params: InfillParams | None = None,
                    infill: bool = True):
    """Rigidly move ``selection`` on a copy and infill the footprint it leaves behind.

    Footprint points are original positions farther than the selection's median scale from
    every moved position, so an identity motion inserts nothing. Returns (scene, inserted).
    """
    sel = _index_array(selection, len(scene))
    out = apply_transform(scene.copy(), sel, xi)
    empty = np.zeros(0, dtype=np.int64)
    if not infill or xi.is_identity or len(sel) == 0:
        return out, empty
    tol = float(np.median(np.exp(scene.log_scales[sel]).max(axis=1)))
    footprint = vacated_footprint(scene.means[sel], out.means[sel], tol)
    if len(footprint) == 0:
        return out, empty
    return infill_footprint(out, footprint, params, exclude=sel)


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    beta: np.ndarray
    score: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    def table(self) -> np.ndarray:
        return np.column_stack([self.positions, self.colors, self.beta, self.score])


def export_pointcloud(scene: GaussianScene, selection=None, scores=None) -> PointCloud:
    idx = np.arange(len(scene)) if selection is None else _index_array(selection, len(scene))
    s = np.zeros(len(scene)) if scores is None else np.asarray(scores, dtype=np.float64)
    return PointCloud(scene.means[idx].copy(), base_colors(scene)[idx], scene.affordances[idx], s[idx])


def write_pointcloud(pc: PointCloud, path) -> None:
    """``.ply`` gets x, y, z, red, green, blue; anything else is a FEATF1 table (N x 1 x 8)."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        export_ply(path, pc.positions, pc.colors)
    else:
        write_featf1(path, pc.table().reshape(len(pc), 1, 8))
