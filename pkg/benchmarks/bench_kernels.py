"""Compare the compiled and numpy segmentation kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the three segmented stages of SALG-T at 224x224 input.
Both backends are also checked for identical output on every case.
"""

import argparse
import timeit

import numpy as np

from salg import _kernels_py

try:
    from salg import _kernels
except ImportError:
    _kernels = None

CASES = [
    # (name, batch, side, channels, window, pad)
    ("stage0", 8, 56, 96, 7, 1),
    ("stage1", 8, 28, 192, 7, 2),
    ("stage2", 8, 14, 384, 7, 1),
]


def _inputs(batch, side, channels, window, seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((batch, side, side, channels))
    n = side // window
    means = feats.reshape(batch, n, window, n, window, channels).mean(axis=(2, 4))
    return feats, means


def _time(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1

    print(f"{'case':<8s} {'kernel':<14s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, batch, side, channels, window, pad in CASES:
        feats, means = _inputs(batch, side, channels, window)
        ids_py = _kernels_py.assign_tokens(feats, means, window, pad, 1e-12)
        ids_cy = _kernels.assign_tokens(feats, means, window, pad, 1e-12)
        assert np.array_equal(ids_py, ids_cy), f"assign_tokens differs on {name}"
        valid = np.ones((side, side), dtype=np.uint8)
        idx_py = _kernels_py.region_index(ids_py, valid, window, pad)
        idx_cy = _kernels.region_index(ids_cy, valid, window, pad)
        assert all(np.array_equal(a, b) for a, b in zip(idx_py, idx_cy)), \
            f"region_index differs on {name}"

        rows = [
            ("assign_tokens",
             lambda: _kernels_py.assign_tokens(feats, means, window, pad, 1e-12),
             lambda: _kernels.assign_tokens(feats, means, window, pad, 1e-12)),
            ("region_index",
             lambda: _kernels_py.region_index(ids_py, valid, window, pad),
             lambda: _kernels.region_index(ids_py, valid, window, pad)),
        ]
        for kernel, slow, fast in rows:
            t_py = _time(slow, args.repeat) * 1e3
            t_cy = _time(fast, args.repeat) * 1e3
            print(f"{name:<8s} {kernel:<14s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
