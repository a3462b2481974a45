# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled segmentation kernels (see ``_kernels_py`` for the reference fallback)."""

import numpy as np

from libc.math cimport sqrt


def assign_tokens(const double[:, :, :, ::1] feats, const double[:, :, :, ::1] means,
                  Py_ssize_t window, Py_ssize_t pad, double eps):
    """Region id per token: cosine argmax over the region means whose
    coverage area contains the token. Ties keep the token's own window,
    otherwise the smallest row-major region index."""
    cdef Py_ssize_t nb = feats.shape[0], h = feats.shape[1], w = feats.shape[2]
    cdef Py_ssize_t c = feats.shape[3], nr = means.shape[1], nc = means.shape[2]
    cdef Py_ssize_t reach = (pad + window - 1) // window
    out = np.empty((nb, h, w), dtype=np.int64)
    mnorm_arr = np.empty((nb, nr, nc), dtype=np.float64)
    cdef long long[:, :, ::1] res = out
    cdef double[:, :, ::1] mnorm = mnorm_arr
    cdef Py_ssize_t b, y, x, a, q, k, a0, q0, best
    cdef double acc, fn, sim, best_sim

    for b in range(nb):
        for a in range(nr):
            for q in range(nc):
                acc = 0.0
                for k in range(c):
                    acc += means[b, a, q, k] * means[b, a, q, k]
                acc = sqrt(acc)
                mnorm[b, a, q] = acc if acc > eps else eps

    for b in range(nb):
        for y in range(h):
            a0 = y // window
            for x in range(w):
                q0 = x // window
                acc = 0.0
                for k in range(c):
                    acc += feats[b, y, x, k] * feats[b, y, x, k]
                fn = sqrt(acc)
                if fn < eps:
                    fn = eps
                acc = 0.0
                for k in range(c):
                    acc += means[b, a0, q0, k] * feats[b, y, x, k]
                best_sim = acc / (mnorm[b, a0, q0] * fn)
                best = a0 * nc + q0
                for a in range(a0 - reach, a0 + reach + 1):
                    if a < 0 or a >= nr or y < a * window - pad or y >= (a + 1) * window + pad:
                        continue
                    for q in range(q0 - reach, q0 + reach + 1):
                        if q < 0 or q >= nc or x < q * window - pad or x >= (q + 1) * window + pad:
                            continue
                        if a == a0 and q == q0:
                            continue
                        acc = 0.0
                        for k in range(c):
                            acc += means[b, a, q, k] * feats[b, y, x, k]
                        sim = acc / (mnorm[b, a, q] * fn)
                        if sim > best_sim:
                            best_sim = sim
                            best = a * nc + q
                res[b, y, x] = best
    return out


def region_index(const long long[:, :, ::1] region_id, const unsigned char[:, ::1] valid,
                 Py_ssize_t window, Py_ssize_t pad):
    """Flat gather indices (-1 = masked) and (row, col) origins (-1 = outside the map)
    for every coverage slot of every region."""
    cdef Py_ssize_t nb = region_id.shape[0], h = region_id.shape[1], w = region_id.shape[2]
    cdef Py_ssize_t nr = h // window, nc = w // window, side = window + 2 * pad
    cdef Py_ssize_t nk = nr * nc, ns = side * side
    flat_arr = np.full((nb, nk, ns), -1, dtype=np.int64)
    origin_arr = np.full((nb, nk, ns, 2), -1, dtype=np.int64)
    cdef long long[:, :, ::1] flat = flat_arr
    cdef long long[:, :, :, ::1] origin = origin_arr
    cdef Py_ssize_t b, a, q, i, j, y, x, kk, s

    for b in range(nb):
        for a in range(nr):
            for q in range(nc):
                kk = a * nc + q
                for i in range(side):
                    y = a * window - pad + i
                    if y < 0 or y >= h:
                        continue
                    for j in range(side):
                        x = q * window - pad + j
                        if x < 0 or x >= w:
                            continue
                        s = i * side + j
                        origin[b, kk, s, 0] = y
                        origin[b, kk, s, 1] = x
                        if valid[y, x] and region_id[b, y, x] == kk:
                            flat[b, kk, s] = (b * h + y) * w + x
    return flat_arr, origin_arr
