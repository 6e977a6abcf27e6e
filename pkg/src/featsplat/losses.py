"""Training losses with their gradients w.r.t. the rendered buffers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
COS_EPS = 1e-8


@dataclass
class LossWeights:
    kappa_s: float = 1.0
    kappa_g: float = 1.0
    kappa_b: float = 1.0
    lambda_ssim: float = 0.2

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0, got {v}")


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _gauss_kernel():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-x ** 2 / (2 * SSIM_SIGMA ** 2))
    return k / k.sum()


def _blur(img):
    k = _gauss_kernel()
    out = correlate1d(img, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=1, mode="constant", cval=0.0)


def ssim(x, y, return_grad: bool = False):
    """Mean SSIM over all pixels and channels of two H x W (x C) images in [0, 1].

    Zero-padded 11x11 Gaussian window (sigma 1.5). With ``return_grad`` also
    returns d SSIM / d x.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_shapes(x, y)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * cxy + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    s = a1 * a2 / (b1 * b2)
    val = float(s.mean())
    if not return_grad:
        return val
    n = s.size
    # written as differences that vanish exactly when x == y (then a1 == b1, a2 == b2, s == 1)
    d_mx = 2 * (my * (a2 - a1) + mx * s * (b1 - b2)) / (b1 * b2)
    u = a1 / (b1 * b2)
    # the zero-padded symmetric blur is self-adjoint
    grad = (_blur(d_mx) + 2 * (y * _blur(u) - x * _blur(u * (a2 / b2)))) / n
    return val, grad


def photometric_loss(rendered, target, lambda_ssim: float = 0.2, return_grad: bool = False):
    """(1 - lambda) * mean|r - t| + lambda * (1 - SSIM(r, t))."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check_shapes(r, t)
    diff = r - t
    l1 = float(np.abs(diff).mean())
    if lambda_ssim == 0:
        if return_grad:
            return l1, np.sign(diff) / diff.size
        return l1
    if return_grad:
        s, gs = ssim(r, t, return_grad=True)
    else:
        s = ssim(r, t)
    val = (1 - lambda_ssim) * l1 + lambda_ssim * (1 - s)
    if not return_grad:
        return val
    return val, (1 - lambda_ssim) * np.sign(diff) / diff.size - lambda_ssim * gs


def pixel_cosine(r, t, return_grad: bool = False):
    """Mean per-pixel cosine over pixels whose target vector is nonzero.

    The rendered norm carries a tiny floor so pixels with no coverage score 0
    and the value stays continuous as coverage appears.
    """
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tn = np.linalg.norm(t, axis=-1)
    mask = tn > 0
    n = int(mask.sum())
    if n == 0:
        return (0.0, np.zeros_like(r)) if return_grad else 0.0
    tn_s = np.where(mask, tn, 1.0)
    rs = np.sqrt(np.sum(r * r, axis=-1) + COS_EPS)
    dot = np.sum(r * t, axis=-1)
    cos = np.where(mask, dot / (tn_s * rs), 0.0)
    val = float(cos.sum() / n)
    if not return_grad:
        return val
    g = (t / (tn_s * rs)[..., None] - (dot / (tn_s * rs ** 3))[..., None] * r) * mask[..., None] / n
    return val, g


def cosine_similarity(a, b) -> float:
    """Cosine of two vectors; 0 when either is the zero vector."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def bilinear_resize(img, height: int, width: int):
    """Half-pixel-centred bilinear resize of an H x W x C map."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0, n_in - 1)
        i0 = np.floor(c).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def semantic_loss_target(rendered_sem, target, kappa_s: float = 1.0, return_grad: bool = False):
    """kappa_s * MSE(rendered, target) + (1 - mean per-pixel cosine)."""
    r = np.asarray(rendered_sem, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check_shapes(r, t)
    diff = r - t
    mse = float(np.mean(diff * diff))
    if return_grad:
        cos, gcos = pixel_cosine(r, t, return_grad=True)
        return kappa_s * mse + (1 - cos), kappa_s * 2 * diff / diff.size - gcos
    return kappa_s * mse + (1 - pixel_cosine(r, t))


def semantic_target(f_gt, encoder, height: int, width: int):
    """Encode a ground-truth feature map and resize it to the render resolution."""
    return bilinear_resize(encoder(f_gt), height, width)


def semantic_loss(rendered_sem, f_gt, encoder, kappa_s: float = 1.0, return_grad: bool = False):
    r = np.asarray(rendered_sem, dtype=np.float64)
    target = semantic_target(f_gt, encoder, r.shape[0], r.shape[1])
    if target.shape != r.shape:
        raise ValueError(f"encoder output dim {target.shape[-1]} does not match rendered dim {r.shape[-1]}")
    return semantic_loss_target(r, target, kappa_s, return_grad)


def affordance_loss(rendered_aff, target, kappa_b: float = 1.0, return_grad: bool = False):
    """kappa_b * mean((rendered - target)^2)."""
    r = np.asarray(rendered_aff, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check_shapes(r, t)
    diff = r - t
    val = kappa_b * float(np.mean(diff * diff))
    if return_grad:
        return val, kappa_b * 2 * diff / diff.size
    return val


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


@dataclass
class ViewTargets:
    """Per-view supervision. ``semantic`` is already encoded and resized to H x W x l."""

    rgb: np.ndarray | None = None
    affordance: np.ndarray | None = None
    semantic: np.ndarray | None = None


def view_loss(buffers, targets: ViewTargets, weights: LossWeights, terms=("rgb", "affordance", "semantic")):
    """Total loss of one rendered view and its gradient as buffers.

    Returns (total, per-term dict, RenderedBuffers of d loss / d buffer).
    """
    from .raster import RenderedBuffers

    grad = RenderedBuffers(*(np.zeros_like(b) for b in (buffers.rgb, buffers.semantic, buffers.affordance,
                                                          buffers.alpha, buffers.depth)))
    parts = {}
    if "rgb" in terms and targets.rgb is not None:
        v, g = photometric_loss(buffers.rgb, targets.rgb, weights.lambda_ssim, return_grad=True)
        parts["rgb"] = v
        grad.rgb += g
    if "affordance" in terms and targets.affordance is not None:
        v, g = affordance_loss(buffers.affordance, targets.affordance, weights.kappa_b, return_grad=True)
        parts["affordance"] = v
        grad.affordance += g
    if "semantic" in terms and targets.semantic is not None:
        v, g = semantic_loss_target(buffers.semantic, targets.semantic, weights.kappa_s, return_grad=True)
        parts["semantic"] = v
        grad.semantic += g
    return float(sum(parts.values())), parts, grad
