import numpy as np
import pytest

from salg.segmentation import SegmentationConfig


def random_map_corpus(n, seed=0, sizes=(8, 28), channels=(8, 16, 32), windows=(2, 4, 7),
                      pads=(0, 1, 2)):
    """Yield ``(map (H, W, C), SegmentationConfig)`` pairs for fuzzing.

    A third of the maps use values from {-1, 0, 1} so that exact similarity
    ties are common; another third have whole blocks of zero tokens.
    """
    rng = np.random.default_rng(seed)
    for i in range(n):
        h, w = (int(v) for v in rng.integers(sizes[0], sizes[1] + 1, 2))
        c = int(rng.choice(channels))
        cfg = SegmentationConfig(int(rng.choice(windows)), int(rng.choice(pads)))
        if i % 3 == 0:
            f = rng.integers(-1, 2, (h, w, c)).astype(np.float64)
        else:
            f = rng.standard_normal((h, w, c))
            if i % 3 == 2:
                y, x = rng.integers(0, h), rng.integers(0, w)
                f[y:y + 5, x:x + 5] = 0.0
        yield f, cfg


def coverage_contains(region, y, x, n_cols, cfg):
    a, q = divmod(int(region), n_cols)
    k, p = cfg.window, cfg.pad
    return a * k - p <= y <= a * k + k - 1 + p and q * k - p <= x <= q * k + k - 1 + p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
