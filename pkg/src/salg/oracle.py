"""Slow, loop-based reference implementations used to cross-check the fast paths.

Nothing here calls into the production segmentation, attention or
convolution code; the only shared items are the constants that define the
problem (``EPS_NORM``, LayerNorm epsilon, the tie-break rule).
"""

from __future__ import annotations

import decimal
import math
from dataclasses import dataclass, field

import numpy as np

from salg.segmentation import EPS_NORM, RegionAssignment, SegmentationConfig
from salg.tensor import no_grad


@dataclass
class OracleReport:
    max_abs_err: float
    max_rel_err: float
    mismatches: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.mismatches


def compare(actual, expected, atol):
    """Elementwise comparison; coordinates with abs error above ``atol`` are mismatches."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ValueError(f"shape mismatch {actual.shape} vs {expected.shape}")
    diff = np.abs(actual - expected)
    rel = diff / np.maximum(1e-12, np.abs(actual) + np.abs(expected))
    bad = [tuple(int(i) for i in ix) for ix in zip(*np.nonzero(diff > atol))]
    return OracleReport(float(diff.max(initial=0.0)), float(rel.max(initial=0.0)), bad)


# ----------------------------------------------------------------- segmentation


def brute_force_assign(f, cfg, valid=None):
    """Token assignment by scanning every region mean for every token.

    ``f`` is one (H, W, C) map; it is zero-padded up to the window grid if
    needed. Returns a batch-of-one RegionAssignment.
    """
    f = np.asarray(f, dtype=np.float64)
    h0, w0, c = f.shape
    k = cfg.window
    h = -(-h0 // k) * k
    w = -(-w0 // k) * k
    grid = np.zeros((h, w, c))
    grid[:h0, :w0] = f
    if valid is None:
        valid = np.zeros((h, w), dtype=bool)
        valid[:h0, :w0] = True
    nr, nc = h // k, w // k

    means = []
    for a in range(nr):
        for q in range(nc):
            acc = np.zeros(c)
            for y in range(a * k, a * k + k):
                for x in range(q * k, q * k + k):
                    acc = acc + grid[y, x]
            means.append(acc / (k * k))

    rid = np.empty((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            tok = grid[y, x]
            tnorm = max(math.sqrt(float(np.dot(tok, tok))), cfg.eps_norm)
            own = (y // k) * nc + x // k
            best_key = None
            for idx, m in enumerate(means):
                a, q = divmod(idx, nc)
                top, bottom = a * k - cfg.pad, a * k + k - 1 + cfg.pad
                left, right = q * k - cfg.pad, q * k + k - 1 + cfg.pad
                if not (top <= y <= bottom and left <= x <= right):
                    continue
                mnorm = max(math.sqrt(float(np.dot(m, m))), cfg.eps_norm)
                sim = float(np.dot(m, tok)) / (mnorm * tnorm)
                key = (sim, idx == own, -idx)
                if best_key is None or key > best_key:
                    best_key = key
            assert best_key is not None, "token outside every coverage area"
            rid[y, x] = -best_key[2]
    return RegionAssignment(rid[None], cfg, valid)


# ----------------------------------------------------------------- convolution


def direct_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Six nested loops over a (B, H, W, Cin) map with zero padding."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    nb, h, w, cin = x.shape
    cout, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((nb, ho, wo, cout))
    for b in range(nb):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    acc = 0.0 if bias is None else float(bias[co])
                    for i in range(kh):
                        y = oy * stride - padding + i
                        if y < 0 or y >= h:
                            continue
                        for j in range(kw):
                            xx = ox * stride - padding + j
                            if xx < 0 or xx >= w:
                                continue
                            acc += float(np.dot(x[b, y, xx], weight[co, :, i, j]))
                    out[b, oy, ox, co] = acc
    return out


# ----------------------------------------------------------------- attention


def hp_softmax(values, digits=50):
    """Softmax evaluated in ``digits``-digit decimal arithmetic."""
    ctx = decimal.Context(prec=digits)
    vals = [ctx.create_decimal(repr(float(v))) for v in values]
    top = max(vals)
    exps = [ctx.exp(ctx.subtract(v, top)) for v in vals]
    total = sum(exps, decimal.Decimal(0))
    return [float(ctx.divide(e, total)) for e in exps]


def _softmax_loop(row):
    top = max(row)
    exps = [math.exp(v - top) for v in row]
    s = math.fsum(exps)
    return [e / s for e in exps]


def _layer_norm_vec(v, gamma, beta, eps=1e-5):
    n = len(v)
    mu = math.fsum(v) / n
    var = math.fsum((t - mu) ** 2 for t in v) / n
    inv = 1.0 / math.sqrt(var + eps)
    return np.array([(v[i] - mu) * inv * gamma[i] + beta[i] for i in range(n)])


def _gelu_scalar(t):
    return 0.5 * t * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (t + 0.044715 * t**3)))


def _offset_row(pi, pj, side):
    (yi, xi), (yj, xj) = pi, pj
    return (yi - yj + side - 1) * (2 * side - 1) + (xi - xj + side - 1)


def dense_attention_oracle(tokens, params, positions=None, agr=None, side=None, heads=None):
    """One pre-LN transformer block over a plain token list, written as loops.

    ``tokens`` are the valid tokens only (null slots physically removed);
    ``positions`` are their (row, col) in the coverage area and, with
    ``side``, select relative-bias rows from ``params["attn.rel_bias"]``.
    ``agr`` (a C-vector) is prepended when given. ``params`` hold numpy
    arrays named as in the model. Returns the block output, AGR row first.
    """
    p = {k: np.asarray(getattr(v, "data", v), dtype=np.float64) for k, v in params.items()}
    seq = [np.asarray(t, dtype=np.float64) for t in tokens]
    kinds = ["tok"] * len(seq)
    pos = list(positions) if positions is not None else [None] * len(seq)
    if agr is not None:
        seq = [np.asarray(agr, dtype=np.float64)] + seq
        kinds = ["agr"] + kinds
        pos = [None] + pos
    n = len(seq)
    c = seq[0].shape[0]
    if heads is None:
        heads = c // 32
    d = c // heads
    use_bias = side is not None and "attn.rel_bias" in p
    n_off = (2 * side - 1) ** 2 if use_bias else 0

    def bias(i, j, hh):
        if not use_bias:
            return 0.0
        if kinds[i] == "agr" and kinds[j] == "agr":
            row = n_off + 2
        elif kinds[i] == "agr":
            row = n_off
        elif kinds[j] == "agr":
            row = n_off + 1
        else:
            row = _offset_row(pos[i], pos[j], side)
        return p["attn.rel_bias"][row, hh]

    wqkv = p["attn.qkv.weight"]
    qb, vb = p["attn.q_bias"], p["attn.v_bias"]
    normed = [_layer_norm_vec(t, p["norm1.weight"], p["norm1.bias"]) for t in seq]
    qs = [t @ wqkv[:, :c] + qb for t in normed]
    ks = [t @ wqkv[:, c:2 * c] for t in normed]
    vs = [t @ wqkv[:, 2 * c:] + vb for t in normed]

    attended = []
    for i in range(n):
        out = np.zeros(c)
        for hh in range(heads):
            sl = slice(hh * d, (hh + 1) * d)
            logits = [float(np.dot(qs[i][sl], ks[j][sl])) / math.sqrt(d) + bias(i, j, hh)
                      for j in range(n)]
            weights = _softmax_loop(logits)
            for j in range(n):
                out[sl] += weights[j] * vs[j][sl]
        attended.append(out @ p["attn.proj.weight"] + p["attn.proj.bias"])
    mid = [seq[i] + attended[i] for i in range(n)]

    result = []
    for t in mid:
        hdn = _layer_norm_vec(t, p["norm2.weight"], p["norm2.bias"])
        hdn = hdn @ p["mlp.fc1.weight"] + p["mlp.fc1.bias"]
        hdn = np.array([_gelu_scalar(v) for v in hdn])
        result.append(t + hdn @ p["mlp.fc2.weight"] + p["mlp.fc2.bias"])
    return np.stack(result)


# ----------------------------------------------------------------- gradients


def numeric_grad(f, params, h=1e-5, tol=1e-4, max_coords=None, seed=0):
    """Second, independent central-difference checker returning an OracleReport.

    Mismatches are ``(name, flat_index)`` pairs whose relative error
    ``|a - n| / max(1e-12, |a| + |n|)`` exceeds ``tol``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    items = list(params.items()) if isinstance(params, dict) else \
        [(getattr(p, "name", None) or f"param{i}", p) for i, p in enumerate(params)]
    with no_grad():
        base_a = f().data.copy()
        base_b = f().data.copy()
    if not np.array_equal(base_a, base_b):
        raise ValueError("function is not deterministic")

    for _, p in items:
        p.grad = None
    f().backward()
    grads = {name: (np.zeros(p.shape) if p.grad is None else np.array(p.grad)) for name, p in items}

    rng = np.random.default_rng(seed)
    max_abs = max_rel = 0.0
    bad = []
    for name, p in items:
        original = p.data.copy()
        total = original.size
        picks = range(total) if max_coords is None or total <= max_coords else \
            sorted(rng.permutation(total)[:max_coords].tolist())
        for flat in picks:
            ix = np.unravel_index(flat, original.shape)
            bumped = original.copy()
            bumped[ix] += h
            p.data[...] = bumped
            with no_grad():
                up = float(f().data)
            bumped[ix] = original[ix] - h
            p.data[...] = bumped
            with no_grad():
                down = float(f().data)
            p.data[...] = original
            num = (up - down) / (2 * h)
            ana = float(grads[name][ix])
            abs_err = abs(ana - num)
            rel_err = abs_err / max(1e-12, abs(ana) + abs(num))
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
            if rel_err > tol:
                bad.append((name, int(flat)))
    return OracleReport(max_abs, max_rel, bad)
