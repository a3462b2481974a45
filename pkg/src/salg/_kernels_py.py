"""Vectorised numpy versions of the compiled segmentation kernels.

Same signatures and results as ``_kernels``; used when the extension is not
built or ``SALG_PURE_PYTHON`` is set.
"""

import numpy as np


def assign_tokens(feats, means, window, pad, eps):
    nb, h, w, _ = feats.shape
    nr, nc = means.shape[1], means.shape[2]
    reach = (pad + window - 1) // window
    fnorm = np.maximum(np.sqrt((feats * feats).sum(-1)), eps)
    mnorm = np.maximum(np.sqrt((means * means).sum(-1)), eps)
    ys, xs = np.arange(h), np.arange(w)
    a0, q0 = ys // window, xs // window
    bi = np.arange(nb)[:, None, None]

    def cosine(a, q):
        m = means[bi, a[None, :, None], q[None, None, :]]
        return (m * feats).sum(-1) / (mnorm[bi, a[None, :, None], q[None, None, :]] * fnorm)

    best_sim = cosine(a0, q0)
    best = np.broadcast_to(a0[:, None] * nc + q0[None, :], (nb, h, w)).astype(np.int64)
    for da in range(-reach, reach + 1):
        a = a0 + da
        row_ok = (a >= 0) & (a < nr) & (ys >= a * window - pad) & (ys < (a + 1) * window + pad)
        ac = np.clip(a, 0, nr - 1)
        for dq in range(-reach, reach + 1):
            if da == 0 and dq == 0:
                continue
            q = q0 + dq
            col_ok = (q >= 0) & (q < nc) & (xs >= q * window - pad) & (xs < (q + 1) * window + pad)
            ok = row_ok[:, None] & col_ok[None, :]
            if not ok.any():
                continue
            qc = np.clip(q, 0, nc - 1)
            sim = cosine(ac, qc)
            better = ok & (sim > best_sim)
            best_sim = np.where(better, sim, best_sim)
            best = np.where(better, ac[:, None] * nc + qc[None, :], best)
    return best


def region_index(region_id, valid, window, pad):
    nb, h, w = region_id.shape
    nr, nc = h // window, w // window
    side = window + 2 * pad
    off = np.arange(side) - pad
    ys = (np.arange(nr) * window)[:, None] + off[None, :]
    xs = (np.arange(nc) * window)[:, None] + off[None, :]
    yy = np.broadcast_to(ys[:, None, :, None], (nr, nc, side, side))
    xx = np.broadcast_to(xs[None, :, None, :], (nr, nc, side, side))
    inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    yc, xc = np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)
    kk = (np.arange(nr)[:, None] * nc + np.arange(nc)[None, :])[:, :, None, None]
    valid = np.asarray(valid, dtype=bool)
    ok = inside & valid[yc, xc] & (region_id[:, yc, xc] == kk)
    b = np.arange(nb)[:, None, None, None, None]
    flat = np.where(ok, (b * h + yc) * w + xc, -1).reshape(nb, nr * nc, side * side)
    origin = np.stack([np.where(inside, yy, -1), np.where(inside, xx, -1)], axis=-1)
    origin = np.broadcast_to(origin.reshape(1, nr * nc, side * side, 2),
                             (nb, nr * nc, side * side, 2)).copy()
    return flat.astype(np.int64), origin.astype(np.int64)
