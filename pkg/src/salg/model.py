"""The hierarchical backbone: patch embedding, three segmented stages, one
global stage, patch merging between them and a classification head.

Parameters live in a flat ``name -> Parameter`` dict; every function below
takes that dict and picks its own entries by prefix.
"""

from __future__ import annotations

import numpy as np

from salg.block import (local_global_param_shapes, block_param_shapes, local_global_block,
                        subparams, transformer_block, LN_EPS)
from salg.segmentation import (SegmentationConfig, pad_to_grid, regular_assignment, segment)
from salg.tensor import (Parameter, Tensor, concat, conv2d, expand, gelu, layer_norm,
                         linear, mean, pad2d, reshape)

INIT_STD = 0.02


def param_shapes(config):
    """Ordered name -> shape for every learnable tensor of ``config``."""
    c = config.base_dim
    dims = config.stage_dims
    shapes = {
        "patch_embed.conv1.weight": (c, 3, 3, 3),
        "patch_embed.conv1.bias": (c,),
        "patch_embed.conv2.weight": (c, c, 3, 3),
        "patch_embed.conv2.bias": (c,),
        "patch_embed.conv3.weight": (c, c, 3, 3),
        "patch_embed.conv3.bias": (c,),
        "patch_embed.norm.weight": (c,),
        "patch_embed.norm.bias": (c,),
    }
    for i in range(3):
        d = dims[i]
        side = config.window + 2 * config.pads[i]
        shapes[f"stages.{i}.agr"] = (d,)
        for j in range(config.blocks[i]):
            for k, v in local_global_param_shapes(d, side, config.propagation).items():
                shapes[f"stages.{i}.blocks.{j}.{k}"] = v
        shapes[f"merges.{i}.norm.weight"] = (4 * d,)
        shapes[f"merges.{i}.norm.bias"] = (4 * d,)
        shapes[f"merges.{i}.reduction.weight"] = (4 * d, 2 * d)
    for j in range(config.blocks[3]):
        for k, v in block_param_shapes(dims[3]).items():
            shapes[f"stages.3.blocks.{j}.{k}"] = v
    shapes.update({
        "head.norm.weight": (dims[3],),
        "head.norm.bias": (dims[3],),
        "head.fc.weight": (dims[3], config.num_classes),
        "head.fc.bias": (config.num_classes,),
    })
    return shapes


def count_params(config):
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def param_breakdown(config):
    """Learnable scalars grouped by top-level module (``stages.0``, ``merges.1``, ...)."""
    out = {}
    for name, shape in param_shapes(config).items():
        parts = name.split(".")
        group = ".".join(parts[:2]) if parts[0] in ("stages", "merges") else parts[0]
        out[group] = out.get(group, 0) + int(np.prod(shape))
    return out


def _trunc_normal(rng, shape, std):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_params(config, seed=0):
    """Truncated-normal weights, zero biases, unit norm gains.

    Linear weights, AGR vectors and bias tables use std 0.02. The patch-embed
    convolutions use fan-in scaling, std sqrt(2 / (Cin * kh * kw)): at 0.02
    the embedding entering the first LayerNorm is ~1e-3 in scale and the
    norm's 1/sigma inflates the conv gradients until SGD stalls.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        parts = name.split(".")
        if parts[-2].startswith("norm"):
            data = np.ones(shape) if parts[-1] == "weight" else np.zeros(shape)
        elif parts[-1] == "bias":
            data = np.zeros(shape)
        elif parts[0] == "patch_embed":
            data = _trunc_normal(rng, shape, np.sqrt(2.0 / np.prod(shape[1:])))
        else:
            data = _trunc_normal(rng, shape, INIT_STD)
        params[name] = Parameter(data, name)
    return params


def _as_images(images):
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (B, H, W, 3) images, got {arr.shape}")
    return Tensor(arr)


def patch_embed(images, params):
    x = _as_images(images)
    h, w = x.shape[1], x.shape[2]
    if h % 4 or w % 4:
        raise ValueError(f"image size {h}x{w} is not divisible by 4; resize or pad the input")
    p = subparams(params, "patch_embed.")
    x = gelu(conv2d(x, p["conv1.weight"], p["conv1.bias"], stride=2, padding=1, padding_mode="edge"))
    x = gelu(conv2d(x, p["conv2.weight"], p["conv2.bias"], stride=2, padding=1, padding_mode="edge"))
    x = conv2d(x, p["conv3.weight"], p["conv3.bias"], stride=1, padding=1, padding_mode="edge")
    return layer_norm(x, p["norm.weight"], p["norm.bias"], LN_EPS)


def patch_merging(x, params, index):
    """2x2 neighbourhood concat (odd sides zero-padded first), LayerNorm, linear 4C -> 2C."""
    p = subparams(params, f"merges.{index}.")
    h, w = x.shape[1], x.shape[2]
    if h % 2 or w % 2:
        x = pad2d(x, 0, h % 2, 0, w % 2)
    parts = [x[:, 0::2, 0::2, :], x[:, 1::2, 0::2, :], x[:, 0::2, 1::2, :], x[:, 1::2, 1::2, :]]
    x = layer_norm(concat(parts, axis=-1), p["norm.weight"], p["norm.bias"], LN_EPS)
    return linear(x, p["reduction.weight"])


def stage_assignment(x, index, config, valid):
    """Segment a padded map for stage ``index`` (regular windows when segmentation is off)."""
    seg = SegmentationConfig(config.window, config.pads[index])
    data = x.data if isinstance(x, Tensor) else x
    if config.segmentation:
        return segment(data, seg, valid)
    return regular_assignment(data.shape[:3], seg, valid)


def salg_stage(x, index, params, config, assignment=None):
    """Segment once, run the stage's local-global blocks, crop the padding.

    Returns (map, assignment). A given ``assignment`` is reused instead of
    re-segmenting, which freezes the discrete step for gradient checks.
    """
    if index not in (0, 1, 2):
        raise ValueError(f"segmented stages are 0, 1 and 2, got {index}")
    p = subparams(params, f"stages.{index}.")
    nb, h, w, d = x.shape
    x, valid = pad_to_grid(x, config.window)
    if assignment is None:
        assignment = stage_assignment(x, index, config, valid)
    k = assignment.num_regions
    agr = expand(reshape(p["agr"], (1, 1, d)), (nb, k, d))
    for j in range(config.blocks[index]):
        x, agr = local_global_block(x, assignment, agr, subparams(p, f"blocks.{j}."),
                                    config.propagation)
    if x.shape[1:3] != (h, w):
        x = x[:, :h, :w, :]
    return x, assignment


def normal_stage(x, params, config):
    """Plain global pre-LN transformer blocks over every token of the last stage."""
    nb, h, w, d = x.shape
    t = reshape(x, (nb, h * w, d))
    for j in range(config.blocks[3]):
        t = transformer_block(t, subparams(params, f"stages.3.blocks.{j}."))
    return reshape(t, (nb, h, w, d))


def forward_features(images, params, config, assignments=None):
    """Stage outputs [1/4, 1/8, 1/16, 1/32 resolution] and the three assignments used."""
    x = patch_embed(images, params)
    outs, used = [], []
    for i in range(3):
        x, a = salg_stage(x, i, params, config, None if assignments is None else assignments[i])
        outs.append(x)
        used.append(a)
        x = patch_merging(x, params, i)
    x = normal_stage(x, params, config)
    outs.append(x)
    return outs, used


def forward_classify(images, params, config, assignments=None):
    """Logits (B, num_classes) plus the assignments used by the three segmented stages."""
    outs, used = forward_features(images, params, config, assignments)
    p = subparams(params, "head.")
    x = layer_norm(outs[-1], p["norm.weight"], p["norm.bias"], LN_EPS)
    pooled = mean(x, axis=(1, 2))
    return linear(pooled, p["fc.weight"], p["fc.bias"]), used


class SALGModel:
    """Parameters plus config, with a convenience forward."""

    def __init__(self, config, seed=0):
        self.config = config
        self.params = init_params(config, seed)

    def __call__(self, images, assignments=None):
        logits, _ = forward_classify(images, self.params, self.config, assignments)
        return logits

    def forward(self, images, assignments=None):
        return forward_classify(images, self.params, self.config, assignments)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def num_params(self):
        return sum(p.size for p in self.params.values())
