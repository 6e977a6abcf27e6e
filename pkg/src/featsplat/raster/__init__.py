"""Tile-based front-to-back compositing of projected Gaussians."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _backend
from ..scene import CameraModel, GaussianScene
from .project import Projection, SplatProjection, project_gaussian, project_scene
from .settings import RasterSettings

__all__ = [
    "RasterSettings", "RenderedBuffers", "RenderState", "Projection", "SplatProjection",
    "project_gaussian", "project_scene", "render_view", "rasterize", "composite_splats",
]


def _kernels():
    if _backend.current() == "numba":
        from . import _kernels_numba as k
    else:
        from . import _kernels_numpy as k
    return k


@dataclass
class RenderedBuffers:
    rgb: np.ndarray
    semantic: np.ndarray
    affordance: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray

    @property
    def shape(self):
        return self.rgb.shape[:2]


@dataclass
class RenderState:
    """Forward-pass record consumed by the backward pass."""

    proj: Projection
    order: np.ndarray  # scene indices of valid splats, depth-sorted (ties by index)
    offsets: np.ndarray
    ids: np.ndarray
    t_final: np.ndarray
    n_last: np.ndarray
    feats: np.ndarray
    height: int
    width: int
    n_tx: int
    settings: RasterSettings


def depth_order(proj: Projection) -> np.ndarray:
    idx = np.flatnonzero(proj.valid)
    return idx[np.argsort(proj.depth[idx], kind="stable")]


def composite_splats(mean2d, conic, alpha, feats, height, width, settings: RasterSettings | None = None):
    """Composite splats already in front-to-back order.

    Returns (features H x W x C, accumulated alpha H x W, transmittance, n_last,
    tile offsets, tile ids, n_tiles_x).
    """
    settings = settings or RasterSettings()
    k = _kernels()
    ts = settings.tile_size
    n_tx = -(-width // ts)
    n_ty = -(-height // ts)
    mean2d = np.ascontiguousarray(mean2d, dtype=np.float64).reshape(-1, 2)
    conic = np.ascontiguousarray(conic, dtype=np.float64).reshape(-1, 3)
    alpha = np.ascontiguousarray(alpha, dtype=np.float64).reshape(-1)
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    feats = feats.reshape(len(alpha), feats.shape[-1] if feats.ndim == 2 else -1)
    # axis-aligned bound of the ellipse where the falloff exceeds the floor
    a = conic[:, 0]
    b = conic[:, 1]
    c = conic[:, 2]
    det = a * c - b * b
    m_cut = settings.cutoff_mahalanobis
    with np.errstate(divide="ignore", invalid="ignore"):
        ex = np.sqrt(m_cut * c / det)
        ey = np.sqrt(m_cut * a / det)
    ex = np.nan_to_num(ex, nan=np.inf)
    ey = np.nan_to_num(ey, nan=np.inf)
    x0 = np.clip(np.floor((mean2d[:, 0] - ex) / ts), 0, n_tx - 1)
    x1 = np.clip(np.floor((mean2d[:, 0] + ex) / ts), 0, n_tx - 1)
    y0 = np.clip(np.floor((mean2d[:, 1] - ey) / ts), 0, n_ty - 1)
    y1 = np.clip(np.floor((mean2d[:, 1] + ey) / ts), 0, n_ty - 1)
    rects = np.stack([x0, y0, x1, y1], axis=1).astype(np.int64).reshape(-1, 4)
    offsets, ids = k.bin_tiles(rects, n_tx, n_ty)
    out, acc, t_final, n_last = k.composite_forward(
        mean2d, conic, alpha, feats, offsets, ids, height, width, ts, n_tx,
        settings.alpha_max, settings.min_transmittance, settings.falloff_floor)
    return out, acc, t_final, n_last, offsets, ids, n_tx


def rasterize(proj: Projection, height: int, width: int, settings: RasterSettings | None = None,
              feats: np.ndarray | None = None):
    """Composite arbitrary per-Gaussian features with the render weights of ``proj``.

    Returns (H x W x C features, H x W alpha, RenderState).
    """
    settings = settings or RasterSettings()
    order = depth_order(proj)
    f = proj.feats if feats is None else np.asarray(feats, dtype=np.float64)
    f = f.reshape(len(proj.valid), f.shape[-1] if f.ndim == 2 else -1)
    f = f[order]
    out, acc, t_final, n_last, offsets, ids, n_tx = composite_splats(
        proj.mean2d[order], proj.conic[order], proj.alpha[order], f, height, width, settings)
    state = RenderState(proj, order, offsets, ids, t_final, n_last, f, height, width, n_tx, settings)
    return out, acc, state


def split_buffers(out: np.ndarray, acc: np.ndarray, latent_dim: int) -> RenderedBuffers:
    l = latent_dim
    return RenderedBuffers(rgb=out[..., :3], semantic=out[..., 3:3 + l], affordance=out[..., 3 + l:4 + l],
                           alpha=acc[..., None], depth=out[..., 4 + l:5 + l])


def render_view(scene: GaussianScene, cam: CameraModel, settings: RasterSettings | None = None,
                latent_dim: int | None = None, return_state: bool = False):
    """Render RGB, semantic, affordance, alpha and depth buffers for one camera."""
    if latent_dim is not None and latent_dim != scene.latent_dim:
        raise ValueError(f"latent_dim {latent_dim} does not match scene latent_dim {scene.latent_dim}")
    settings = settings or RasterSettings()
    proj = project_scene(scene, cam, settings)
    out, acc, state = rasterize(proj, cam.height, cam.width, settings)
    buffers = split_buffers(out, acc, scene.latent_dim)
    return (buffers, state) if return_state else buffers
