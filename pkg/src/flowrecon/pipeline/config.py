"""INI configuration: one section per stage, every key typed by its default."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from ..viewplan import PlanConfig
from .recon import ReconConfig


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    seed: int = 0
    n_primitives: int = 150
    trajectory: str = "orbit"
    n_views: int = 48
    image_size: int = 32
    depth_noise: float = 0.05
    metric_scale: float = 1.7
    scale_min: float = 0.05
    scale_max: float = 0.16
    n_inputs: int = 12


@dataclass
class FlowConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    n_targets: int = 2
    n_sources: int = 2
    factor: int = 4
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 8
    source: str = "conditional"
    train_scenes: int = 4
    sparsity_levels: str = "6,12"
    n_steps: int = 20
    schedule: str = "decreasing"
    seed: int = 0

    def levels(self):
        return [int(s) for s in self.sparsity_levels.split(",") if s.strip()]


@dataclass
class EvalConfig:
    opacity_threshold: float | None = None


@dataclass
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sections(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(section, key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if default is None:
            return None if raw.lower() in ("", "none") else float(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None


def apply(cfg, section, key, raw):
    sections = cfg.sections()
    if section not in sections:
        raise ConfigError(f"unknown section [{section}]")
    obj = sections[section]
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    setattr(obj, key, _coerce(section, key, raw, getattr(type(obj)(), key)))


def load_config(path=None, overrides=()):
    """Defaults, then the file (if any), then ``section.key=value`` overrides."""
    cfg = Config()
    if path:
        cp = configparser.ConfigParser()
        try:
            with open(path) as f:
                cp.read_file(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                apply(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        apply(cfg, section.strip(), key.strip(), raw)
    return cfg


def dump_config(cfg):
    cp = configparser.ConfigParser()
    for name, obj in cfg.sections().items():
        cp[name] = {f.name: ("none" if getattr(obj, f.name) is None else str(getattr(obj, f.name))) for f in fields(obj)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def as_dict(cfg):
    return {name: {f.name: getattr(obj, f.name) for f in fields(obj)} for name, obj in cfg.sections().items()}
