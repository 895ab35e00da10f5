"""Run configuration: flat ``section.key = value`` text files.

Example::

    # comments start with '#'
    model.preset = swin_nano
    model.variant = dcfam
    train.steps = 200
    data.synth_count = 8

Every key must be known; an empty value resets an optional field to its
default. ``format_config(RunConfig())`` prints every default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .decoder import VARIANTS
from .encoder import PRESETS, ModelConfig, preset
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    preset: str = "swin_nano"
    variant: str = "dcfam"
    seed: int = 0
    num_classes: int = 6
    # None keeps the preset value
    embed_dim: int | None = None
    depths: tuple | None = None
    num_heads: tuple | None = None
    window_size: int | None = None
    patch_size: int | None = None
    mlp_ratio: float | None = None
    img_size: int | None = None

    def build(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"model.preset: unknown preset {self.preset!r}; "
                              f"choose from {sorted(PRESETS)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant: unknown variant {self.variant!r}; "
                              f"choose from {list(VARIANTS)}")
        overrides = {f.name: getattr(self, f.name) for f in fields(ModelConfig)
                     if f.name != "name" and getattr(self, f.name, None) is not None}
        for key in ("depths", "num_heads"):
            if key in overrides:
                overrides[key] = list(overrides[key])
        try:
            return preset(self.preset, **overrides)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc


@dataclass
class DataSection:
    # empty root selects the synthetic generator
    root: str = ""
    synth_count: int = 8
    synth_size: int = 64
    synth_seed: int = 0
    tile: int = 1024
    stride: int = 0
    ignore_label: int = 255


@dataclass
class OutputSection:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    output: OutputSection = field(default_factory=OutputSection)

    def train_config(self):
        return dataclasses.replace(self.train, ignore_label=self.data.ignore_label)


SECTIONS = ("model", "train", "data", "output")
# lives in data.ignore_label so that train and eval agree
_HIDDEN = {("train", "ignore_label")}


def _section_fields(section):
    cls = type(getattr(RunConfig(), section))
    return {f.name: f for f in fields(cls) if (section, f.name) not in _HIDDEN}


def _parse_value(key, f, raw, default):
    raw = raw.strip()
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    optional = "None" in kind
    if raw == "":
        if optional or kind == "str":
            return None if optional else ""
        raise ConfigError(f"{key}: value required")
    try:
        if "tuple" in kind:
            return tuple(float(v) if "." in v or "e" in v.lower() else int(v)
                         for v in raw.replace(" ", "").split(",") if v)
        if "bool" in kind:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text, base=None):
    """Parse config text on top of ``base`` (defaults when omitted)."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    values = {s: {} for s in SECTIONS}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{key}: duplicate key (line {lineno})")
        seen.add(key)
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{key}: unknown key (line {lineno}); sections are {SECTIONS}")
        known = _section_fields(section)
        if name not in known:
            raise ConfigError(f"{key}: unknown key (line {lineno})")
        values[section][name] = _parse_value(key, known[name], raw,
                                             getattr(getattr(cfg, section), name))
    for section, updates in values.items():
        if not updates:
            continue
        try:
            setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **updates))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{section}: {exc}") from exc
    validate(cfg)
    return cfg


def validate(cfg):
    cfg.model.build()
    d = cfg.data
    if d.synth_count < 1 or d.synth_size < 8:
        raise ConfigError("data.synth_count must be >= 1 and data.synth_size >= 8")
    if d.tile <= 0 or not 0 <= d.stride <= d.tile:
        raise ConfigError("data.tile must be positive and 0 <= data.stride <= data.tile")


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def _format_value(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def format_config(cfg):
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for name in _section_fields(section):
            lines.append(f"{section}.{name} = {_format_value(getattr(obj, name))}".rstrip())
        lines.append("")
    return "\n".join(lines)
