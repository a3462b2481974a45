"""Local-global transformer block.

Local step: pre-LN multi-head attention plus MLP inside every region's
coverage block, with null slots masked out of the keys and a learned
relative position bias. Global step: the per-region AGR tokens are mixed
either by a small transformer block over all regions (``"msa"``) or by
replacing each of them with their average (``"ap"``); ``"none"`` skips it.
"""

from __future__ import annotations

import numpy as np

from salg.segmentation import RegionBatch, gather_regions, scatter_regions
from salg.tensor import (add, concat, expand, layer_norm, linear, mean, mlp, mul,
                         reshape, softmax, take_rows, transpose)

HEAD_DIM = 32
MLP_RATIO = 4
LN_EPS = 1e-5
PROPAGATION_MODES = ("msa", "ap", "none")


def num_heads(dim):
    """``dim / 32`` heads; otherwise the divisor of ``dim`` whose width is closest to 32."""
    if dim < 1:
        raise ValueError(f"channel count must be positive, got {dim}")
    if dim % HEAD_DIM == 0:
        return dim // HEAD_DIM
    divisors = [h for h in range(1, dim + 1) if dim % h == 0]
    return min(divisors, key=lambda h: (abs(dim / h - HEAD_DIM), -h))


def bias_table_rows(side):
    """Rows of the relative position table: grid offsets plus three AGR entries."""
    return (2 * side - 1) ** 2 + 3


def relative_position_index(side):
    """(L, L) table-row index for every (query, key) slot pair, L = side**2 + 1.

    Grid slots use their 2-D offset. Slot 0 is the AGR token: AGR->token,
    token->AGR and AGR->AGR get the three rows after the offset block.
    """
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    coords = np.stack([ii.ravel(), jj.ravel()])
    rel = coords[:, :, None] - coords[:, None, :] + side - 1
    n = (2 * side - 1) ** 2
    size = side * side + 1
    out = np.empty((size, size), dtype=np.int64)
    out[1:, 1:] = rel[0] * (2 * side - 1) + rel[1]
    out[0, 1:] = n
    out[1:, 0] = n + 1
    out[0, 0] = n + 2
    return out


def block_param_shapes(dim, side=None):
    """Parameter shapes of one pre-LN transformer block; ``side`` adds a bias table."""
    shapes = {
        "norm1.weight": (dim,),
        "norm1.bias": (dim,),
        "attn.qkv.weight": (dim, 3 * dim),
        "attn.q_bias": (dim,),
        "attn.v_bias": (dim,),
        "attn.proj.weight": (dim, dim),
        "attn.proj.bias": (dim,),
    }
    if side is not None:
        shapes["attn.rel_bias"] = (bias_table_rows(side), num_heads(dim))
    shapes.update({
        "norm2.weight": (dim,),
        "norm2.bias": (dim,),
        "mlp.fc1.weight": (dim, MLP_RATIO * dim),
        "mlp.fc1.bias": (MLP_RATIO * dim,),
        "mlp.fc2.weight": (MLP_RATIO * dim, dim),
        "mlp.fc2.bias": (dim,),
    })
    return shapes


def local_global_param_shapes(dim, side, mode):
    shapes = block_param_shapes(dim, side)
    if mode == "msa":
        shapes.update({f"prop.{k}": v for k, v in block_param_shapes(dim).items()})
    return shapes


def subparams(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def attention(x, p, bias=None, key_mask=None):
    """Multi-head self-attention over (N, L, C) tokens.

    ``bias`` is added to the (heads, L, L) logits; ``key_mask`` (N, L) bool
    removes False keys by adding -inf.
    """
    n, length, c = x.shape
    heads = num_heads(c)
    # no key bias: softmax is invariant to it
    qkv_bias = concat([p["attn.q_bias"], np.zeros(c), p["attn.v_bias"]])
    qkv = linear(x, p["attn.qkv.weight"], qkv_bias)
    width = c // heads
    qkv = transpose(reshape(qkv, (n, length, 3, heads, width)), (2, 0, 3, 1, 4))
    q = mul(qkv[0], width ** -0.5)
    k, v = qkv[1], qkv[2]
    logits = q @ transpose(k, (0, 1, 3, 2))
    if bias is not None:
        logits = add(logits, bias)
    if key_mask is not None:
        logits = add(logits, np.where(key_mask, 0.0, -np.inf)[:, None, None, :])
    attn = softmax(logits, axis=-1)
    out = reshape(transpose(attn @ v, (0, 2, 1, 3)), (n, length, c))
    return linear(out, p["attn.proj.weight"], p["attn.proj.bias"])


def _attention_residual(x, p, bias=None, key_mask=None):
    h = layer_norm(x, p["norm1.weight"], p["norm1.bias"], LN_EPS)
    return add(x, attention(h, p, bias, key_mask))


def _mlp_branch(x, p):
    h = layer_norm(x, p["norm2.weight"], p["norm2.bias"], LN_EPS)
    return mlp(h, p["mlp.fc1.weight"], p["mlp.fc1.bias"],
               p["mlp.fc2.weight"], p["mlp.fc2.bias"], MLP_RATIO)


def _mlp_residual(x, p):
    return add(x, _mlp_branch(x, p))


def transformer_block(x, p, bias=None, key_mask=None):
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    x = _mlp_residual(_attention_residual(x, p, bias, key_mask), p)
    return reshape(x, x.shape[1:]) if squeeze else x


def position_bias(table, side):
    """(heads, L, L) bias gathered from a relative position table."""
    return transpose(take_rows(table, relative_position_index(side)), (2, 0, 1))


def intra_region_attention(batch, params):
    """Masked attention block inside every region; null slots come out as exact zeros."""
    nb, k, length, c = batch.tokens.shape
    x = reshape(batch.tokens, (nb * k, length, c))
    bias = position_bias(params["attn.rel_bias"], batch.side)
    y = transformer_block(x, params, bias, batch.mask.reshape(nb * k, length))
    y = mul(y, batch.mask.reshape(nb * k, length, 1).astype(np.float64))
    return RegionBatch(reshape(y, (nb, k, length, c)), batch.mask, batch.origin)


def inter_region_msa(agr, params):
    """Transformer block across the K AGR tokens of each image (no positional terms)."""
    if "norm1.weight" not in params:
        raise ValueError("inter-region MSA weights are missing (model built for 'ap'/'none'?)")
    return transformer_block(agr, params)


def inter_region_ap(agr):
    """Replace every AGR token with the average over regions."""
    return expand(mean(agr, axis=-2, keepdims=True), agr.shape)


def propagate(agr, params, mode):
    if mode == "msa":
        return inter_region_msa(agr, subparams(params, "prop."))
    if mode == "ap":
        return inter_region_ap(agr)
    if mode == "none":
        return agr
    raise ValueError(f"unknown propagation mode {mode!r}")


def local_global_block(f, a, agr, params, mode):
    """One block on a padded (B, H, W, C) map with a fixed assignment; returns (map, agr).

    Same result as gather -> intra_region_attention -> scatter, but the
    token-wise MLP half runs after the scatter, on H*W map tokens and K AGR
    tokens rather than on all K*L region slots.
    """
    if mode not in PROPAGATION_MODES:
        raise ValueError(f"unknown propagation mode {mode!r}")
    batch = gather_regions(f, a, agr)
    nb, k, length, c = batch.tokens.shape
    x = reshape(batch.tokens, (nb * k, length, c))
    bias = position_bias(params["attn.rel_bias"], batch.side)
    mask = batch.mask.reshape(nb * k, length)
    x = mul(_attention_residual(x, params, bias, mask), mask[..., None].astype(np.float64))
    mid = RegionBatch(reshape(x, (nb, k, length, c)), batch.mask, batch.origin)
    out = scatter_regions(mid, a, f.shape)
    delta = _mlp_branch(out, params)
    if not a.valid.all():
        # padding tokens stay zero
        delta = mul(delta, a.valid[None, :, :, None].astype(np.float64))
    out = add(out, delta)
    new_agr = _mlp_residual(mid.tokens[:, :, 0, :], params)
    return out, propagate(new_agr, params, mode)


def interaction_count(height, width, window, pad, mode):
    """Attended query-key pairs per layer: K * L**2 (+ K**2 when AGR tokens attend)."""
    hp = -(-height // window) * window
    wp = -(-width // window) * window
    k = (hp // window) * (wp // window)
    length = (window + 2 * pad) ** 2 + 1
    return k * length * length + (k * k if mode == "msa" else 0)


def dense_interaction_count(height, width):
    return (height * width) ** 2

