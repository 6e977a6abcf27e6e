"""EWA projection of 3D Gaussians into a pinhole camera."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scene import CameraModel, GaussianScene, sigmoid, quat_to_rotmat, normalize_quat
from ..sh import sh_basis
from .settings import RasterSettings


@dataclass
class SplatProjection:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha: float
    semantic: np.ndarray
    affordance: float
    radius: float


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities for one view, plus what the backward pass needs.

    Arrays are indexed by scene order; ``valid`` marks splats that survive culling.
    ``feats`` packs [rgb(3), latent(l), affordance(1), depth(1)] per splat.
    """

    valid: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    feats: np.ndarray
    radius: np.ndarray
    extent_xy: np.ndarray
    # backward cache
    t_cam: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    quat_unit: np.ndarray
    quat_norm: np.ndarray
    cov3d: np.ndarray
    view_dir: np.ndarray
    view_dist: np.ndarray
    sh_raw: np.ndarray
    beta: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.feats.shape[1] - 5


def project_scene(scene: GaussianScene, cam: CameraModel, settings: RasterSettings | None = None,
                  latents: np.ndarray | None = None) -> Projection:
    settings = settings or RasterSettings()
    n = len(scene)
    means = scene.means.astype(np.float64)
    qn = np.linalg.norm(scene.quats.astype(np.float64), axis=1)
    qn_safe = np.where(qn > 0, qn, 1.0)
    q_unit = scene.quats.astype(np.float64) / qn_safe[:, None]
    rot = quat_to_rotmat(q_unit) if n else np.zeros((0, 3, 3))
    scales = np.exp(scene.log_scales.astype(np.float64))
    M = rot * scales[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)

    W = cam.R
    t_cam = means @ W.T + cam.t
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    in_front = z > settings.near
    zs = np.where(in_front, z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs ** 2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs ** 2
    T = J @ W
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += settings.cov_blur
    cov2d[:, 1, 1] += settings.cov_blur
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok_det = det > 0
    det_s = np.where(ok_det, det, 1.0)
    conic = np.stack([c / det_s, -b / det_s, a / det_s], axis=1)
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)

    m_cut = settings.cutoff_mahalanobis
    ext = np.sqrt(m_cut * np.stack([a, c], axis=1).clip(min=0))
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.sqrt(m_cut * lam_max)
    on_screen = ((mean2d[:, 0] + ext[:, 0] >= 0) & (mean2d[:, 0] - ext[:, 0] <= cam.width - 1)
                 & (mean2d[:, 1] + ext[:, 1] >= 0) & (mean2d[:, 1] - ext[:, 1] <= cam.height - 1))
    valid = in_front & ok_det & on_screen

    center = cam.center
    v = means - center
    dist = np.linalg.norm(v, axis=1)
    dirs = v / np.where(dist > 0, dist, 1.0)[:, None]
    basis = sh_basis(dirs, scene.sh_degree)
    sh_raw = np.einsum("nk,nkc->nc", basis, scene.sh.astype(np.float64)) + 0.5
    rgb = np.clip(sh_raw, 0.0, 1.0)

    alpha = sigmoid(scene.opacity_logits)
    beta = sigmoid(scene.aff_logits)
    lat = scene.latents.astype(np.float64) if latents is None else np.asarray(latents, dtype=np.float64)
    feats = np.concatenate([rgb, lat, beta[:, None], z[:, None]], axis=1)

    return Projection(valid=valid, mean2d=mean2d, cov2d=cov2d, conic=conic, depth=z, alpha=alpha,
                      feats=feats, radius=radius, extent_xy=ext, t_cam=t_cam, rot=rot, scales=scales,
                      quat_unit=q_unit, quat_norm=qn_safe, cov3d=cov3d, view_dir=dirs, view_dist=dist,
                      sh_raw=sh_raw, beta=beta)


def project_gaussian(g, cam: CameraModel, sh_degree: int | None = None,
                     settings: RasterSettings | None = None) -> SplatProjection | None:
    """Project one primitive; returns None when it is culled."""
    normalize_quat(g.rotation)
    deg = sh_degree if sh_degree is not None else int(round(np.sqrt(len(g.sh_coeffs)))) - 1
    scene = GaussianScene.from_primitives([g], latent_dim=len(g.semantic_latent), sh_degree=deg, extent=1.0)
    p = project_scene(scene, cam, settings)
    if not p.valid[0]:
        return None
    l = p.latent_dim
    return SplatProjection(mean2d=p.mean2d[0], cov2d=p.cov2d[0], depth=float(p.depth[0]), color=p.feats[0, :3],
                           alpha=float(p.alpha[0]), semantic=p.feats[0, 3:3 + l],
                           affordance=float(p.feats[0, 3 + l]), radius=float(p.radius[0]))
