"""Command-line entry point: ``salg segment|params|gradcheck|train|forward|ablation|synth``.

Exit codes: 0 success, 1 check failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
import time

import numpy as np

from salg import tensor
from salg.checkpoint import CheckpointError, load_into, save_checkpoint
from salg.config import (ABLATION_VARIANTS, ConfigError, ModelConfig, ablation_variant,
                         format_config, load_config, preset)
from salg.gradcheck import finite_diff_errors, gradcheck_problem
from salg.imageio import ImageFormatError, read_ppm, write_pgm
from salg.model import (count_params, forward_classify, init_params, param_breakdown,
                        patch_embed, patch_merging, salg_stage, stage_assignment)
from salg.oracle import numeric_grad
from salg.segmentation import pad_to_grid
from salg.tensor import no_grad
from salg.train import (TrainingError, load_image_folder, make_shape_dataset, normalize_images,
                        toy_train, write_image_folder)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOL = 1e-4
MAX_GRADCHECK_TOKENS = 1024


class UsageError(Exception):
    pass


def _config(args):
    if args.config is None:
        return ModelConfig() if args.preset is None else preset(args.preset)
    if args.preset is not None:
        raise UsageError("give either --config or --preset, not both")
    return load_config(args.config)


def _params(args, config):
    params = init_params(config, args.seed)
    if getattr(args, "checkpoint", None):
        load_into(params, args.checkpoint)
    return params


def _thread_limit():
    raw = os.environ.get("SALG_THREADS")
    if raw is None or raw == "":
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SALG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SALG_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# ------------------------------------------------------------------ commands


def region_map(image, params, config, stage):
    """Per-pixel region ids of ``stage`` for one (H, W, 3) image in [0, 1]."""
    x = patch_embed(normalize_images(image)[None], params)
    with no_grad():
        for i in range(stage):
            x, _ = salg_stage(x, i, params, config)
            x = patch_merging(x, params, i)
        h, w = x.shape[1], x.shape[2]
        padded, valid = pad_to_grid(x, config.window)
        a = stage_assignment(padded, stage, config, valid)
    ids = a.region_id[0, :h, :w]
    scale = 4 * 2**stage
    up = np.repeat(np.repeat(ids, scale, axis=0), scale, axis=1)
    return up[:image.shape[0], :image.shape[1]]


def cmd_segment(args):
    if args.stage not in (0, 1, 2):
        raise UsageError(f"--stage must be 0, 1 or 2, got {args.stage}")
    if args.out is None:
        raise UsageError("segment needs --out")
    config = _config(args)
    image = read_ppm(args.image)
    if image.shape[0] % 4 or image.shape[1] % 4:
        raise UsageError(f"image size {image.shape[1]}x{image.shape[0]} is not divisible by 4")
    ids = region_map(image, _params(args, config), config, args.stage)
    write_pgm(args.out, ids)
    print(f"stage {args.stage}: {len(np.unique(ids))} regions -> {args.out}")
    return EXIT_OK


def cmd_params(args):
    config = _config(args)
    total = count_params(config)
    print(format_config(config), end="")
    for group, n in param_breakdown(config).items():
        print(f"{group:<14s}{n:>12,d}")
    print(f"{'total':<14s}{total:>12,d}  ({total / 1e6:.2f}M)")
    return EXIT_OK


def cmd_gradcheck(args):
    config = _config(args)
    tokens = (config.input_size // 4) ** 2
    if tokens > MAX_GRADCHECK_TOKENS:
        raise UsageError(f"gradcheck is limited to {MAX_GRADCHECK_TOKENS} stage-0 tokens; "
                         f"input_size {config.input_size} gives {tokens}")
    loss, params = gradcheck_problem(config, seed=args.seed)
    tensor.CORRUPT_BACKWARD = args.corrupt_backward
    try:
        t0 = time.perf_counter()
        errors = finite_diff_errors(loss, params, max_coords=args.max_coords, seed=args.seed)
        report = numeric_grad(loss, params, tol=GRADCHECK_TOL, max_coords=args.max_coords,
                              seed=args.seed + 1)
        elapsed = time.perf_counter() - t0
    finally:
        tensor.CORRUPT_BACKWARD = False
    worst_name = max(errors, key=errors.get)
    worst = max(errors[worst_name], report.max_rel_err)
    print(f"finite_diff_check: max rel err {errors[worst_name]:.3e} (worst parameter {worst_name})")
    print(f"numeric_grad:      max rel err {report.max_rel_err:.3e}, "
          f"{len(report.mismatches)} coordinate(s) above {GRADCHECK_TOL:g}")
    if report.mismatches:
        print(f"  first mismatch: {report.mismatches[0][0]}[{report.mismatches[0][1]}]")
    ok = worst < GRADCHECK_TOL
    print(f"{'PASS' if ok else 'FAIL'}: max rel err {worst:.3e} ({elapsed:.1f}s)")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train(args):
    if args.out is None:
        raise UsageError("train needs --out (output directory)")
    if args.epochs < 1 or args.batch_size < 1 or args.lr <= 0:
        raise UsageError("--epochs and --batch-size must be >= 1 and --lr positive")
    config = _config(args)
    images, labels, classes = load_image_folder(args.dataset)
    if len(classes) > config.num_classes:
        raise UsageError(f"{len(classes)} classes but config has num_classes={config.num_classes}")
    if images.shape[1] != config.input_size:
        config = config.replace(input_size=images.shape[1])

    def log(epoch, loss, acc):
        if not args.quiet:
            print(f"epoch {epoch:3d}  loss {loss:.4f}  train_acc {acc:.3f}", flush=True)

    params, curve = toy_train(images, labels, config, epochs=args.epochs, lr=args.lr,
                              momentum=args.momentum, batch_size=args.batch_size,
                              clip_norm=args.clip_norm or None, seed=args.seed,
                              target_acc=args.target_acc, log=log)
    os.makedirs(args.out, exist_ok=True)
    curve_path = os.path.join(args.out, "curve.csv")
    ckpt_path = os.path.join(args.out, "model.salg")
    curve.write_csv(curve_path)
    save_checkpoint(ckpt_path, params)
    print(f"wrote {curve_path} and {ckpt_path}")
    return EXIT_OK


def cmd_forward(args):
    config = _config(args)
    params = _params(args, config)
    for path in args.images:
        image = read_ppm(path)
        with no_grad():
            logits, _ = forward_classify(normalize_images(image)[None], params, config)
        row = logits.data[0]
        print(f"{path}: class {int(row.argmax())}  logits " + " ".join(f"{v:.4f}" for v in row))
    return EXIT_OK


def cmd_ablation(args):
    base = _config(args)
    rng = np.random.default_rng(args.seed)
    images = rng.random((1, base.input_size, base.input_size, 3))
    failed = False
    for name in ABLATION_VARIANTS:
        config = ablation_variant(base, name)
        with no_grad():
            logits, _ = forward_classify(images, init_params(config, args.seed), config)
        ok = logits.shape == (1, config.num_classes) and np.isfinite(logits.data).all()
        line = (f"{name:<18s} segmentation={str(config.segmentation).lower():<5s} "
                f"propagation={config.propagation:<4s} params={count_params(config):>10,d} "
                f"forward={'ok' if ok else 'FAILED'}")
        if args.gradcheck:
            loss, params = gradcheck_problem(config, seed=args.seed)
            err = max(finite_diff_errors(loss, params, max_coords=args.max_coords).values())
            ok = ok and err < GRADCHECK_TOL
            line += f" gradcheck={err:.2e}"
        failed = failed or not ok
        print(line)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_synth(args):
    if args.out is None:
        raise UsageError("synth needs --out (output directory)")
    images, labels = make_shape_dataset(args.n, args.size, args.classes, args.seed)
    write_image_folder(args.out, images, labels)
    print(f"wrote {len(images)} images in {args.classes} classes to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--preset", choices=("ST", "T", "S", "micro"),
                        help="use a built-in preset instead of --config")
    common.add_argument("--seed", type=int, default=0)

    parser = argparse.ArgumentParser(prog="salg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", parents=[common], help="write a stage's region map as PGM")
    p.add_argument("image")
    p.add_argument("--stage", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("params", parents=[common], help="parameter count per module")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", parents=[common], help="end-to-end gradient check")
    p.add_argument("--max-coords", type=int, default=10,
                   help="coordinates probed per parameter tensor (default 10)")
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", parents=[common], help="toy training on a PPM folder")
    p.add_argument("dataset")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--clip-norm", type=float, default=1.0,
                   help="clip the global gradient norm (0 disables)")
    p.add_argument("--target-acc", type=float,
                   help="stop after the first epoch reaching this train accuracy")
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forward", parents=[common], help="classify PPM images")
    p.add_argument("images", nargs="+")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("ablation", parents=[common], help="run the four ablation variants")
    p.add_argument("--gradcheck", action="store_true")
    p.add_argument("--max-coords", type=int, default=10)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("synth", help="write the synthetic shape/colour dataset")
    p.add_argument("--out")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--size", type=int, default=112)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError, CheckpointError, ImageFormatError, TrainingError,
            OSError) as exc:
        print(f"salg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
