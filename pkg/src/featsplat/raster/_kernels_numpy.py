"""Pure-numpy versions of the tile kernels: vectorized over the pixels of a tile,
sequential over the depth-ordered splats binned to it."""
import numpy as np


def bin_tiles(rects, n_tx, n_ty):
    n_tiles = n_tx * n_ty
    per_splat = []
    for i, (x0, y0, x1, y1) in enumerate(rects):
        tys, txs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        per_splat.append((tys * n_tx + txs).ravel())
    if per_splat:
        tiles = np.concatenate(per_splat)
        splat = np.repeat(np.arange(len(rects)), [len(t) for t in per_splat])
    else:
        tiles = np.zeros(0, np.int64)
        splat = np.zeros(0, np.int64)
    order = np.argsort(tiles, kind="stable")
    counts = np.bincount(tiles, minlength=n_tiles)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return offsets, splat[order].astype(np.int64)


def _tile_pixels(tile, n_tx, ts, H, W):
    ty, tx = divmod(tile, n_tx)
    ys, xs = np.mgrid[ty * ts:min(H, (ty + 1) * ts), tx * ts:min(W, (tx + 1) * ts)]
    return ys.ravel(), xs.ravel()


def composite_forward(mean2d, conic, alpha, feats, offsets, ids, H, W, ts, n_tx,
                      alpha_max, t_min, g_min):
    C = feats.shape[1]
    out = np.zeros((H, W, C))
    acc = np.zeros((H, W))
    t_final = np.ones((H, W))
    n_last = np.zeros((H, W), np.int64)
    for tile in range(len(offsets) - 1):
        ys, xs = _tile_pixels(tile, n_tx, ts, H, W)
        start, end = offsets[tile], offsets[tile + 1]
        T = np.ones(len(ys))
        o = np.zeros((len(ys), C))
        s = np.zeros(len(ys))
        last = np.full(len(ys), start, np.int64)
        live = np.ones(len(ys), bool)
        for k in range(start, end):
            i = ids[k]
            dx = xs - mean2d[i, 0]
            dy = ys - mean2d[i, 1]
            m = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
            G = np.exp(-0.5 * m)
            hit = live & (G > g_min)
            if not hit.any():
                continue
            a = np.minimum(alpha[i] * (G[hit] - g_min), alpha_max)
            w = a * T[hit]
            o[hit] += w[:, None] * feats[i]
            s[hit] += w
            T[hit] *= 1.0 - a
            last[hit] = k + 1
            live &= T >= t_min
            if not live.any():
                break
        out[ys, xs] = o
        acc[ys, xs] = s
        t_final[ys, xs] = T
        n_last[ys, xs] = last
    return out, acc, t_final, n_last


def composite_backward(mean2d, conic, alpha, feats, offsets, ids, t_final, n_last, g_out, g_acc,
                       H, W, ts, n_tx, alpha_max, g_min):
    M, C = feats.shape
    g_mean2d = np.zeros((M, 2))
    g_conic = np.zeros((M, 3))
    g_alpha = np.zeros(M)
    g_feats = np.zeros((M, C))
    for tile in range(len(offsets) - 1):
        ys, xs = _tile_pixels(tile, n_tx, ts, H, W)
        start = offsets[tile]
        last = n_last[ys, xs]
        T = t_final[ys, xs].copy()
        go = g_out[ys, xs]
        ga = g_acc[ys, xs]
        rec = np.zeros((len(ys), C))
        rec_a = np.zeros(len(ys))
        for k in range(last.max(initial=start) - 1, start - 1, -1):
            i = ids[k]
            dx = xs - mean2d[i, 0]
            dy = ys - mean2d[i, 1]
            m = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
            G = np.exp(-0.5 * m)
            hit = (k < last) & (G > g_min)
            if not hit.any():
                continue
            G, dx, dy = G[hit], dx[hit], dy[hit]
            raw = alpha[i] * (G - g_min)
            a = np.minimum(raw, alpha_max)
            Th = T[hit] / (1.0 - a)
            T[hit] = Th
            w = a * Th
            g = go[hit]
            r = rec[hit]
            g_feats[i] += w @ g
            dlda = Th * ((g * (feats[i] - r)).sum(axis=1) + ga[hit] * (1.0 - rec_a[hit]))
            rec[hit] = a[:, None] * feats[i] + (1.0 - a[:, None]) * r
            rec_a[hit] = a + (1.0 - a) * rec_a[hit]
            free = raw <= alpha_max
            dlda = np.where(free, dlda, 0.0)
            g_alpha[i] += dlda @ (G - g_min)
            dldm = -0.5 * G * dlda * alpha[i]
            g_conic[i, 0] += dldm @ (dx * dx)
            g_conic[i, 1] += dldm @ (2.0 * dx * dy)
            g_conic[i, 2] += dldm @ (dy * dy)
            g_mean2d[i, 0] -= dldm @ (2.0 * (conic[i, 0] * dx + conic[i, 1] * dy))
            g_mean2d[i, 1] -= dldm @ (2.0 * (conic[i, 1] * dx + conic[i, 2] * dy))
    return g_mean2d, g_conic, g_alpha, g_feats
