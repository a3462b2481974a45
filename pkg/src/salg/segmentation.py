"""Unsupervised semantic region segmentation and region gather/scatter.

A feature map is cut into non-overlapping ``window x window`` windows whose
average features serve as region means. Each token then joins the most
cosine-similar mean among those whose coverage area (the window grown by
``pad`` tokens on every side, clipped at the map border) contains it. Both
steps run once; there is no iterative refinement.

Regions are laid out for attention as fixed-size coverage blocks: slot 0
holds the region's aggregation (AGR) token and the remaining ``side * side``
slots hold the coverage area in row-major order. Slots whose token belongs
to another region, lies outside the map or is padding are masked.

All arrays carry a leading batch axis; single maps of shape (H, W, C) are
accepted and promoted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from salg import kernels
from salg.tensor import Tensor, concat, expand, gather_rows, pad2d, reshape, scatter_rows

EPS_NORM = 1e-12


@dataclass(frozen=True)
class SegmentationConfig:
    window: int
    pad: int
    eps_norm: float = EPS_NORM

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")
        if not self.eps_norm > 0:
            raise ValueError("eps_norm must be positive")

    @property
    def coverage_side(self):
        return self.window + 2 * self.pad

    @property
    def slots(self):
        """Slots per region: the coverage area plus the AGR slot."""
        return self.coverage_side**2 + 1


@dataclass
class RegionMeans:
    grid: np.ndarray  # (B, n_rows, n_cols, C)

    @property
    def n_rows(self):
        return self.grid.shape[1]

    @property
    def n_cols(self):
        return self.grid.shape[2]


@dataclass
class RegionAssignment:
    region_id: np.ndarray  # (B, H, W) int64, row-major region index
    config: SegmentationConfig
    valid: np.ndarray  # (H, W) bool, False on padding

    @property
    def n_rows(self):
        return self.region_id.shape[1] // self.config.window

    @property
    def n_cols(self):
        return self.region_id.shape[2] // self.config.window

    @property
    def num_regions(self):
        return self.n_rows * self.n_cols


@dataclass
class RegionBatch:
    tokens: Tensor  # (B, K, L, C); slot 0 is the AGR token
    mask: np.ndarray  # (B, K, L) bool; True where the slot takes part in attention
    origin: np.ndarray  # (B, K, L, 2) int64 (row, col) in the map, -1 for AGR / outside

    @property
    def side(self):
        return int(round(np.sqrt(self.tokens.shape[2] - 1)))


def _data(f):
    return f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)


def _batched(arr):
    return arr[None] if arr.ndim == 3 else arr


def pad_to_grid(f, window):
    """Zero-pad H and W up to multiples of ``window``; return (padded, valid mask)."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    h, w = f.shape[-3], f.shape[-2]
    hp = -(-h // window) * window
    wp = -(-w // window) * window
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    if isinstance(f, Tensor):
        if (hp, wp) != (h, w):
            f = pad2d(f, 0, hp - h, 0, wp - w)
        return f, valid
    arr = np.asarray(f, dtype=np.float64)
    widths = [(0, 0)] * (arr.ndim - 3) + [(0, hp - h), (0, wp - w), (0, 0)]
    return np.pad(arr, widths), valid


def estimate_region_means(f, cfg):
    arr = _batched(_data(f))
    nb, h, w, c = arr.shape
    k = cfg.window
    if h % k or w % k:
        raise ValueError(f"map {h}x{w} is not divisible by window {k}; call pad_to_grid first")
    grid = arr.reshape(nb, h // k, k, w // k, k, c).mean(axis=(2, 4))
    return RegionMeans(grid)


def assign_tokens(f, means, cfg, valid=None):
    arr = _batched(_data(f))
    if means.grid.shape[0] != arr.shape[0] or means.n_rows * cfg.window != arr.shape[1] \
            or means.n_cols * cfg.window != arr.shape[2]:
        raise ValueError("region means do not match the feature map and config")
    rid = kernels.assign_tokens(arr, means.grid, cfg.window, cfg.pad, cfg.eps_norm)
    if valid is None:
        valid = np.ones(arr.shape[1:3], dtype=bool)
    return RegionAssignment(rid, cfg, np.asarray(valid, dtype=bool))


def regular_assignment(shape, cfg, valid=None):
    """The plain window partition of a (B, H, W) grid, used when segmentation is off."""
    nb, h, w = shape
    k = cfg.window
    if h % k or w % k:
        raise ValueError(f"grid {h}x{w} is not divisible by window {k}")
    rid = (np.arange(h)[:, None] // k) * (w // k) + np.arange(w)[None, :] // k
    rid = np.broadcast_to(rid, (nb, h, w)).astype(np.int64)
    if valid is None:
        valid = np.ones((h, w), dtype=bool)
    return RegionAssignment(rid, cfg, np.asarray(valid, dtype=bool))


def segment(f, cfg, valid=None):
    """Region means followed by token assignment, on an already padded map."""
    return assign_tokens(f, estimate_region_means(f, cfg), cfg, valid)


def gather_regions(f, a, agr):
    """Lay out each region's coverage area as one masked token block with AGR in slot 0."""
    if not isinstance(f, Tensor):
        f = Tensor(_batched(np.asarray(f, dtype=np.float64)))
    nb, h, w, c = f.shape
    k = a.num_regions
    if not isinstance(agr, Tensor):
        agr = Tensor(agr)
    if agr.shape[-2:] != (k, c) or agr.ndim not in (2, 3):
        raise ValueError(f"expected AGR tokens of shape (B, {k}, {c}) or ({k}, {c}), got {agr.shape}")
    if agr.ndim == 2:
        agr = expand(agr, (nb, k, c))
    flat, origin = kernels.region_index(a.region_id, a.valid, a.config.window, a.config.pad)
    rows = gather_rows(reshape(f, (nb * h * w, c)), flat)
    tokens = concat([reshape(agr, (nb, k, 1, c)), rows], axis=2)
    mask = np.concatenate([np.ones((nb, k, 1), dtype=bool), flat >= 0], axis=2)
    origin = np.concatenate([np.full((nb, k, 1, 2), -1, dtype=np.int64), origin], axis=2)
    return RegionBatch(tokens, mask, origin)


def scatter_regions(b, a, shape):
    """Write every unmasked non-AGR slot back to its map position.

    Raises RuntimeError if a valid token is written zero or several times, or
    a padding token is written at all.
    """
    nb, k, slots, c = b.tokens.shape
    h, w = a.region_id.shape[1], a.region_id.shape[2]
    if tuple(shape[-3:-1]) != (h, w):
        raise ValueError(f"target shape {shape} does not match the assignment grid {h}x{w}")
    live = b.mask[:, :, 1:]
    org = b.origin[:, :, 1:]
    bi = np.arange(nb)[:, None, None]
    idx = np.where(live, (bi * h + org[..., 0]) * w + org[..., 1], -1)
    counts = np.bincount(idx[idx >= 0], minlength=nb * h * w).reshape(nb, h, w)
    expected = np.broadcast_to(a.valid, (nb, h, w)).astype(np.int64)
    if not np.array_equal(counts, expected):
        raise RuntimeError("scatter_regions: region batch is not a partition of the valid tokens")
    src = b.tokens[:, :, 1:, :]
    out = scatter_rows(src, idx, nb * h * w)
    return reshape(out, (nb, h, w, c))
