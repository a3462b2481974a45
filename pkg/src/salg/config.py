"""Model configuration, presets and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from salg.block import PROPAGATION_MODES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_dim: int = 96
    blocks: tuple = (2, 2, 6, 2)
    window: int = 7
    pads: tuple = (1, 2, 1)
    propagation: str = "ap"
    segmentation: bool = True
    num_classes: int = 1000
    input_size: int = 224

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "pads", tuple(int(p) for p in self.pads))
        if self.base_dim <= 0:
            raise ConfigError(f"base_dim must be positive, got {self.base_dim}")
        if len(self.blocks) != 4 or min(self.blocks) < 1:
            raise ConfigError(f"blocks needs 4 positive entries, got {self.blocks}")
        if len(self.pads) != 3 or min(self.pads) < 0:
            raise ConfigError(f"pads needs 3 non-negative entries, got {self.pads}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.propagation not in PROPAGATION_MODES:
            raise ConfigError(f"propagation must be one of {PROPAGATION_MODES}, got {self.propagation!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.input_size < 4 or self.input_size % 4:
            raise ConfigError(f"input_size must be a positive multiple of 4, got {self.input_size}")

    @property
    def stage_dims(self):
        return tuple(self.base_dim * 2**i for i in range(4))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


PRESETS = {
    "ST": ModelConfig(base_dim=48, blocks=(2, 2, 2, 2)),
    "T": ModelConfig(base_dim=96, blocks=(2, 2, 6, 2)),
    "S": ModelConfig(base_dim=96, blocks=(2, 2, 18, 2)),
    # desk-scale verification model
    "micro": ModelConfig(base_dim=32, blocks=(1, 1, 1, 1), window=4, pads=(1, 1, 1),
                         num_classes=10, input_size=32),
}


def preset(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides) if overrides else base


ABLATION_VARIANTS = ("base", "base+local&global", "base+seg+local", "salg")


def ablation_variant(config, name):
    """The four ablation variants: segmentation on/off crossed with propagation on/off."""
    mode = config.propagation if config.propagation != "none" else "ap"
    table = {
        "base": (False, "none"),
        "base+local&global": (False, mode),
        "base+seg+local": (True, "none"),
        "salg": (True, mode),
    }
    if name not in table:
        raise ConfigError(f"unknown ablation variant {name!r}")
    seg, prop = table[name]
    return config.replace(segmentation=seg, propagation=prop)


def _int_list(value, n, key):
    parts = [p for p in value.replace(",", " ").split() if p]
    if len(parts) != n:
        raise ConfigError(f"{key} needs {n} integers, got {value!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{key} needs integers, got {value!r}") from None


def _bool(value, key):
    v = value.lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key} must be true/false, got {value!r}")


def parse_config(text):
    """Parse ``key = value`` lines; ``#`` starts a comment. ``preset`` picks the defaults."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value

    base = preset(entries.pop("preset")) if "preset" in entries else ModelConfig()
    fields = {}
    try:
        for key, value in entries.items():
            if key in ("base_dim", "window", "num_classes", "input_size"):
                fields[key] = int(value)
            elif key == "blocks":
                fields[key] = _int_list(value, 4, key)
            elif key == "pads":
                fields[key] = _int_list(value, 3, key)
            elif key == "propagation":
                fields[key] = value.lower()
            elif key == "segmentation":
                fields[key] = _bool(value, key)
            else:
                raise ConfigError(f"unknown config key {key!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return base.replace(**fields)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(config):
    return "\n".join([
        f"base_dim = {config.base_dim}",
        f"blocks = {','.join(map(str, config.blocks))}",
        f"window = {config.window}",
        f"pads = {','.join(map(str, config.pads))}",
        f"propagation = {config.propagation}",
        f"segmentation = {str(config.segmentation).lower()}",
        f"num_classes = {config.num_classes}",
        f"input_size = {config.input_size}",
    ]) + "\n"
