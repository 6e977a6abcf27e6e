"""Naive per-pixel compositor: every splat against every pixel, no tiles and no falloff floor.

Used as a test oracle for the tiled kernels.
"""
import numpy as np


def composite_reference(mean2d, conic, alpha, depth, feats, height, width, alpha_max=0.99, t_min=1e-4):
    """Composite splats sorted here by (depth, input index) with the exact Gaussian falloff."""
    mean2d = np.asarray(mean2d, dtype=np.float64).reshape(-1, 2)
    conic = np.asarray(conic, dtype=np.float64).reshape(-1, 3)
    feats = np.asarray(feats, dtype=np.float64).reshape(len(mean2d), -1)
    order = sorted(range(len(mean2d)), key=lambda i: (float(depth[i]), i))
    ys, xs = np.mgrid[0:height, 0:width]
    out = np.zeros((height, width, feats.shape[1]))
    acc = np.zeros((height, width))
    T = np.ones((height, width))
    done = np.zeros((height, width), bool)
    for i in order:
        dx = xs - mean2d[i, 0]
        dy = ys - mean2d[i, 1]
        quad = conic[i, 0] * dx ** 2 + 2 * conic[i, 1] * dx * dy + conic[i, 2] * dy ** 2
        a = np.minimum(alpha[i] * np.exp(-0.5 * quad), alpha_max)
        a = np.where(done, 0.0, a)
        w = a * T
        out += w[..., None] * feats[i]
        acc += w
        T = T * (1 - a)
        done |= T < t_min
    return out, acc


def render_reference(proj, height, width, settings=None):
    from .settings import RasterSettings

    settings = settings or RasterSettings()
    v = np.flatnonzero(proj.valid)
    return composite_reference(proj.mean2d[v], proj.conic[v], proj.alpha[v], proj.depth[v], proj.feats[v],
                               height, width, settings.alpha_max, settings.min_transmittance)
