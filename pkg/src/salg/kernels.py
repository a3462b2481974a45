"""Backend selection for the segmentation hot loops.

The compiled ``_kernels`` extension is used when it imports and
``SALG_PURE_PYTHON`` is unset; otherwise the numpy versions in
``_kernels_py`` run. ``BACKEND`` records which one is active.
"""

import os

import numpy as np

from salg import _kernels_py

python_backend = _kernels_py
compiled_backend = None

if not os.environ.get("SALG_PURE_PYTHON"):
    try:
        from salg import _kernels as compiled_backend
    except ImportError:
        compiled_backend = None

_impl = compiled_backend or python_backend
BACKEND = "cython" if compiled_backend is not None else "python"


def assign_tokens(feats, means, window, pad, eps):
    return _impl.assign_tokens(np.ascontiguousarray(feats, dtype=np.float64),
                               np.ascontiguousarray(means, dtype=np.float64),
                               int(window), int(pad), float(eps))


def region_index(region_id, valid, window, pad):
    return _impl.region_index(np.ascontiguousarray(region_id, dtype=np.int64),
                              np.ascontiguousarray(valid, dtype=np.uint8),
                              int(window), int(pad))
