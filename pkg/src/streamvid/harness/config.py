"""Run configuration and its INI file form.

A config file has sections ``[run]``, ``[model]``, ``[optim]`` and ``[data]``;
every :class:`RunConfig` field lives in exactly one of them. Unknown sections
or keys are errors, so typos never silently fall back to defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields

from ..errors import ConfigError
from ..fusion import FEATURE_MODES
from ..readout import TASKS
from ..temporal import ALL_VARIANTS

REGIMES = ("frozen", "finetune", "streaming")
# (total steps, warmup steps) per regime: 1/40 of the full-length schedules
REGIME_STEPS = {"frozen": (1000, 25), "finetune": (2500, 125), "streaming": (500, 25)}

SECTIONS = {
    "run": ("task", "variant", "feature_mode", "regime", "seed"),
    "model": ("dim", "layers", "state_dim", "heads", "gate_bias", "chunk", "adapter_norm",
              "encoder_depth", "encoder_heads", "patch_size", "registers", "image_size",
              "frames", "readout_hidden", "classes", "points", "encoder_seed"),
    "optim": ("lr", "warmup", "steps", "batch_size", "weight_decay", "beta1", "beta2",
              "eps", "clip_norm"),
    "data": ("train_clips", "eval_clips", "data_seed"),
}


@dataclass
class RunConfig:
    task: str = "classify"
    variant: str = "gmmix"
    feature_mode: str = "multi_depth"
    regime: str = "streaming"
    seed: int = 0

    dim: int = 64
    layers: int = 2
    state_dim: int = 16
    heads: int = 4
    gate_bias: float = 0.0
    chunk: int = 0  # 0 runs the sequential scan
    adapter_norm: str = "batch"
    encoder_depth: int = 8
    encoder_heads: int = 4
    patch_size: int = 8
    registers: int = 4
    image_size: int = 32
    frames: int = 8
    readout_hidden: int = 128
    classes: int = 4
    points: int = 8
    encoder_seed: int = 0

    lr: float = 1e-3
    warmup: int = -1  # -1 takes the regime default
    steps: int = -1
    batch_size: int = 8
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0  # 0 disables clipping

    train_clips: int = 256
    eval_clips: int = 128
    data_seed: int = 1234

    def __post_init__(self):
        default_steps, default_warmup = REGIME_STEPS.get(self.regime, (0, 0))
        if self.steps < 0:
            self.steps = default_steps
        if self.warmup < 0:
            self.warmup = default_warmup
        self.validate()

    def validate(self):
        choices = {"task": TASKS, "variant": ALL_VARIANTS, "feature_mode": FEATURE_MODES,
                   "regime": REGIMES, "adapter_norm": ("batch", "token")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r}; expected one of {allowed}")
        for name in ("dim", "layers", "state_dim", "heads", "encoder_depth", "patch_size",
                     "image_size", "frames", "batch_size", "classes", "points", "train_clips", "eval_clips"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.encoder_depth % 4:
            raise ConfigError("encoder_depth must be divisible by 4")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.lr < 0 or self.steps < 0 or self.warmup < 0 or self.chunk < 0:
            raise ConfigError("lr, steps, warmup and chunk must be non-negative")
        if self.steps and self.warmup >= self.steps:
            raise ConfigError(f"warmup ({self.warmup}) must be shorter than steps ({self.steps})")

    @property
    def trains_temporal(self):
        return self.regime != "frozen"

    @property
    def readout_mode(self):
        # the pose head has no offline form, so pose always reads out per frame
        return "streaming" if self.regime == "streaming" or self.task == "pose" else "offline"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_ini(self):
        lines = []
        for section, keys in SECTIONS.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {getattr(self, k)}" for k in keys)
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = _coerce(key, raw, types[key])
        return cls(**values)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_ini(fh.read())


def _coerce(key, raw, kind):
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw.strip()
