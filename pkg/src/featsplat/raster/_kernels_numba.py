"""Tile compositing kernels compiled with numba."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def bin_tiles(rects, n_tx, n_ty):
    n_tiles = n_tx * n_ty
    counts = np.zeros(n_tiles + 1, np.int64)
    for i in range(rects.shape[0]):
        for ty in range(rects[i, 1], rects[i, 3] + 1):
            for tx in range(rects[i, 0], rects[i, 2] + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], np.int64)
    fill = offsets[:-1].copy()
    for i in range(rects.shape[0]):
        for ty in range(rects[i, 1], rects[i, 3] + 1):
            for tx in range(rects[i, 0], rects[i, 2] + 1):
                t = ty * n_tx + tx
                ids[fill[t]] = i
                fill[t] += 1
    return offsets, ids


@njit(cache=True)
def composite_forward(mean2d, conic, alpha, feats, offsets, ids, H, W, ts, n_tx,
                      alpha_max, t_min, g_min):
    C = feats.shape[1]
    out = np.zeros((H, W, C))
    acc = np.zeros((H, W))
    t_final = np.ones((H, W))
    n_last = np.zeros((H, W), np.int64)
    n_tiles = offsets.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // n_tx
        tx = tile - ty * n_tx
        start = offsets[tile]
        end = offsets[tile + 1]
        for py in range(ty * ts, min(H, (ty + 1) * ts)):
            for px in range(tx * ts, min(W, (tx + 1) * ts)):
                T = 1.0
                last = start
                for k in range(start, end):
                    i = ids[k]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    m = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                    G = math.exp(-0.5 * m)
                    if G <= g_min:
                        continue
                    a = alpha[i] * (G - g_min)
                    if a > alpha_max:
                        a = alpha_max
                    w = a * T
                    for c in range(C):
                        out[py, px, c] += w * feats[i, c]
                    acc[py, px] += w
                    T *= 1.0 - a
                    last = k + 1
                    if T < t_min:
                        break
                t_final[py, px] = T
                n_last[py, px] = last
    return out, acc, t_final, n_last


@njit(cache=True)
def composite_backward(mean2d, conic, alpha, feats, offsets, ids, t_final, n_last, g_out, g_acc,
                       H, W, ts, n_tx, alpha_max, g_min):
    M = mean2d.shape[0]
    C = feats.shape[1]
    g_mean2d = np.zeros((M, 2))
    g_conic = np.zeros((M, 3))
    g_alpha = np.zeros(M)
    g_feats = np.zeros((M, C))
    rec = np.zeros(C)
    n_tiles = offsets.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // n_tx
        tx = tile - ty * n_tx
        start = offsets[tile]
        for py in range(ty * ts, min(H, (ty + 1) * ts)):
            for px in range(tx * ts, min(W, (tx + 1) * ts)):
                T = t_final[py, px]
                for c in range(C):
                    rec[c] = 0.0
                rec_a = 0.0
                ga = g_acc[py, px]
                for k in range(n_last[py, px] - 1, start - 1, -1):
                    i = ids[k]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    m = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                    G = math.exp(-0.5 * m)
                    if G <= g_min:
                        continue
                    raw = alpha[i] * (G - g_min)
                    a = raw
                    if a > alpha_max:
                        a = alpha_max
                    T = T / (1.0 - a)
                    w = a * T
                    dlda = ga * (1.0 - rec_a)
                    for c in range(C):
                        g = g_out[py, px, c]
                        g_feats[i, c] += w * g
                        dlda += g * (feats[i, c] - rec[c])
                        rec[c] = a * feats[i, c] + (1.0 - a) * rec[c]
                    rec_a = a + (1.0 - a) * rec_a
                    dlda *= T
                    if raw <= alpha_max:
                        g_alpha[i] += dlda * (G - g_min)
                        dldm = -0.5 * G * dlda * alpha[i]
                        g_conic[i, 0] += dldm * dx * dx
                        g_conic[i, 1] += dldm * 2.0 * dx * dy
                        g_conic[i, 2] += dldm * dy * dy
                        g_mean2d[i, 0] -= dldm * 2.0 * (conic[i, 0] * dx + conic[i, 1] * dy)
                        g_mean2d[i, 1] -= dldm * 2.0 * (conic[i, 1] * dx + conic[i, 2] * dy)
    return g_mean2d, g_conic, g_alpha, g_feats
