"""Semantic-aware local-global vision transformer on a small numpy autodiff core."""

from salg.config import PRESETS, ModelConfig, load_config, parse_config, preset
from salg.kernels import BACKEND
from salg.model import SALGModel, count_params, forward_classify, init_params

__all__ = [
    "BACKEND",
    "PRESETS",
    "ModelConfig",
    "SALGModel",
    "count_params",
    "forward_classify",
    "init_params",
    "load_config",
    "parse_config",
    "preset",
]
__version__ = "0.1.0"
