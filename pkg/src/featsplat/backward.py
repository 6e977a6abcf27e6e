"""Analytic reverse pass from per-pixel buffer gradients to every Gaussian parameter."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .raster import RenderedBuffers, RenderState
from .sh import sh_basis, sh_basis_grad

PARAM_CLASSES = ("means", "log_scales", "quats", "opacity_logits", "sh", "latents", "aff_logits")


@dataclass
class SceneGradients:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    latents: np.ndarray
    aff_logits: np.ndarray

    @classmethod
    def zeros_like(cls, scene) -> "SceneGradients":
        return cls(*(np.zeros(getattr(scene, f).shape) for f in PARAM_CLASSES))

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def __add__(self, other: "SceneGradients") -> "SceneGradients":
        return SceneGradients(*(getattr(self, f) + getattr(other, f) for f in PARAM_CLASSES))

    def scaled(self, s: float) -> "SceneGradients":
        return SceneGradients(*(getattr(self, f) * s for f in PARAM_CLASSES))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, f))) for f in PARAM_CLASSES)


def _kernels():
    if _backend.current() == "numba":
        from .raster import _kernels_numba as k
    else:
        from .raster import _kernels_numpy as k
    return k


def upstream_from_buffers(grad: RenderedBuffers, latent_dim: int):
    """Pack buffer gradients into the compositor's feature layout."""
    g_out = np.concatenate([grad.rgb, grad.semantic, grad.affordance, grad.depth], axis=-1)
    assert g_out.shape[-1] == 5 + latent_dim
    return g_out, grad.alpha[..., 0]


def zero_upstream(height: int, width: int, latent_dim: int) -> RenderedBuffers:
    z = lambda c: np.zeros((height, width, c))  # noqa: E731
    return RenderedBuffers(z(3), z(latent_dim), z(1), z(1), z(1))


def splat_backward(state: RenderState, g_out: np.ndarray, g_acc: np.ndarray):
    """Gradients w.r.t. the depth-ordered splat inputs (mean2d, conic, alpha, feats), in scene order."""
    s = state.settings
    k = _kernels()
    p = state.proj
    o = state.order
    g_mean2d, g_conic, g_alpha, g_feats = k.composite_backward(
        np.ascontiguousarray(p.mean2d[o]), np.ascontiguousarray(p.conic[o]), np.ascontiguousarray(p.alpha[o]),
        np.ascontiguousarray(state.feats), state.offsets, state.ids, state.t_final, state.n_last,
        np.ascontiguousarray(g_out, dtype=np.float64), np.ascontiguousarray(g_acc, dtype=np.float64),
        state.height, state.width, s.tile_size, state.n_tx, s.alpha_max, s.falloff_floor)
    n = len(p.valid)
    full = lambda g: np.zeros((n,) + g.shape[1:])  # noqa: E731
    out = [full(g_mean2d), full(g_conic), full(g_alpha), full(g_feats)]
    for dst, src in zip(out, (g_mean2d, g_conic, g_alpha, g_feats)):
        dst[o] = src
    return out


def _quat_grad(q, g_R):
    """d L / d q for unit quaternions q (N, 4) given d L / d R (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    G = g_R
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def scene_backward(scene, cam, state: RenderState, g_out: np.ndarray, g_acc: np.ndarray) -> SceneGradients:
    """Chain splat-level gradients through projection, covariance and activations."""
    p = state.proj
    l = scene.latent_dim
    g_mean2d, g_conic, g_alpha, g_feats = splat_backward(state, g_out, g_acc)
    v = p.valid.astype(np.float64)
    g_mean2d *= v[:, None]
    g_conic *= v[:, None]
    g_alpha *= v
    g_feats *= v[:, None]

    # conic = inverse(cov2d); conic packs (Q00, Q01, Q11) with Q01 used twice
    Q = np.empty((len(v), 2, 2))
    Q[:, 0, 0] = p.conic[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = p.conic[:, 1]
    Q[:, 1, 1] = p.conic[:, 2]
    gQ = np.empty_like(Q)
    gQ[:, 0, 0] = g_conic[:, 0]
    gQ[:, 0, 1] = gQ[:, 1, 0] = 0.5 * g_conic[:, 1]
    gQ[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -Q @ gQ @ Q

    t = p.t_cam
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    z = np.where(p.valid, z, 1.0)
    fx, fy = cam.fx, cam.fy
    W = cam.R
    J = np.zeros((len(v), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z ** 2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z ** 2
    T = J @ W
    Tt = np.swapaxes(T, 1, 2)
    g_cov3d = Tt @ g_cov2d @ T
    g_T = 2.0 * g_cov2d @ T @ p.cov3d
    g_J = g_T @ W.T

    g_t = np.zeros_like(t)
    g_t[:, 0] += g_J[:, 0, 2] * (-fx / z ** 2)
    g_t[:, 1] += g_J[:, 1, 2] * (-fy / z ** 2)
    g_t[:, 2] += (g_J[:, 0, 0] * (-fx / z ** 2) + g_J[:, 0, 2] * (2 * fx * x / z ** 3)
                  + g_J[:, 1, 1] * (-fy / z ** 2) + g_J[:, 1, 2] * (2 * fy * y / z ** 3))
    g_t[:, 0] += g_mean2d[:, 0] * fx / z
    g_t[:, 1] += g_mean2d[:, 1] * fy / z
    g_t[:, 2] += -g_mean2d[:, 0] * fx * x / z ** 2 - g_mean2d[:, 1] * fy * y / z ** 2
    g_t[:, 2] += g_feats[:, 4 + l]
    g_means = g_t @ W

    # color: clamp(sum_k b_k(dir) c_k + 0.5, 0, 1) with dir = (mu - cam_center)/|.|
    g_raw = g_feats[:, :3] * ((p.sh_raw > 0) & (p.sh_raw < 1))
    basis = sh_basis(p.view_dir, scene.sh_degree)
    g_sh = basis[:, :, None] * g_raw[:, None, :]
    if scene.sh_degree > 0:
        dbasis = sh_basis_grad(p.view_dir, scene.sh_degree)
        g_b = np.einsum("nkc,nc->nk", scene.sh.astype(np.float64), g_raw)
        g_dir = np.einsum("nk,nkd->nd", g_b, dbasis)
        d = p.view_dir
        proj_dir = g_dir - d * np.sum(g_dir * d, axis=1, keepdims=True)
        g_means += proj_dir / np.where(p.view_dist > 0, p.view_dist, 1.0)[:, None]

    # Sigma = (R S)(R S)^T
    gS = 0.5 * (g_cov3d + np.swapaxes(g_cov3d, 1, 2))
    Mrs = p.rot * p.scales[:, None, :]
    g_M = 2.0 * gS @ Mrs
    g_scale = np.einsum("nij,nij->nj", g_M, p.rot)
    g_log_scales = g_scale * p.scales
    g_R = g_M * p.scales[:, None, :]
    g_qu = _quat_grad(p.quat_unit, g_R)
    qu = p.quat_unit
    g_quats = (g_qu - qu * np.sum(g_qu * qu, axis=1, keepdims=True)) / p.quat_norm[:, None]

    g_opacity = g_alpha * p.alpha * (1 - p.alpha)
    g_lat = g_feats[:, 3:3 + l]
    g_aff = g_feats[:, 3 + l] * p.beta * (1 - p.beta)
    return SceneGradients(g_means, g_log_scales, g_quats, g_opacity, g_sh, g_lat, g_aff)


def composite_backward(scene, cam, upstream: RenderedBuffers, state: RenderState | None = None,
                       settings=None) -> SceneGradients:
    """Gradients of sum(upstream * rendered buffers) w.r.t. all scene parameters."""
    if state is None:
        from .raster import render_view

        _, state = render_view(scene, cam, settings, return_state=True)
    g_out, g_acc = upstream_from_buffers(upstream, scene.latent_dim)
    return scene_backward(scene, cam, state, g_out, g_acc)
