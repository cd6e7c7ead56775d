"""``key = value`` run configuration with command-line overrides.

Defaults follow the published training setup: 5 trees of depth 5 per
landmark, 5 stages, 20x augmentation, bottlenecks 16..48, SGD from a
learning rate of 1 with minibatches of 128.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .cascade import DEFAULT_R_SCHEDULE, TrainConfig
from .decoders import KINDS, SGDSchedule
from .ensemble import DEFAULT_RADII
from .errors import ConfigError


def _opt(conv):
    def parse(v):
        return None if v.strip().lower() in ("", "none", "auto") else conv(v)
    return parse


def _tuple(conv):
    def parse(v):
        items = [t for t in v.replace(",", " ").split() if t]
        return tuple(conv(t) for t in items)
    return parse


def _bool(v):
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


@dataclass
class RunConfig:
    # paths
    data: str | None = None
    index: str | None = None
    out: str = "model.tcsc"
    report: str | None = None
    # forest and cascade
    n_trees: int = 5
    depth: int = 5
    stages: int = 5
    n_candidates: int = 128
    radii: tuple = DEFAULT_RADII
    # augmentation
    augment: int = 20
    flip_prob: float = 0.5
    max_rotation: float = 20.0
    scale_range: tuple = (0.9, 1.1)
    shift_range: tuple = (-0.1, 0.1)
    # decoder
    decoder: str = "rrr"
    r_schedule: tuple = DEFAULT_R_SCHEDULE
    ridge: float | None = None
    lr0: float = 1.0
    batch_size: int = 128
    patience: int = 3
    max_epochs: int = 200
    min_lr: float = 1.0 / 1024
    quantize: int | None = None
    # dataset conventions
    iod: tuple | None = None
    mirror_map: tuple | None = None
    box_margin: float = 0.1
    # execution
    seed: int = 0
    threads: int = 1
    verbose: bool = False

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            n_trees=self.n_trees, depth=self.depth, stages=self.stages, augment=self.augment,
            decoder=self.decoder, r_schedule=self.r_schedule, radii=self.radii,
            n_candidates=self.n_candidates, ridge=self.ridge, flip_prob=self.flip_prob,
            max_rotation=self.max_rotation, scale_range=self.scale_range,
            shift_range=self.shift_range,
            sgd=SGDSchedule(lr0=self.lr0, patience=self.patience, batch_size=self.batch_size,
                            max_epochs=self.max_epochs, min_lr=self.min_lr),
            seed=self.seed, threads=self.threads)

    def as_dict(self):
        return dataclasses.asdict(self)


PARSERS = {
    "data": _opt(str), "index": _opt(str), "out": str, "report": _opt(str),
    "n_trees": int, "depth": int, "stages": int, "n_candidates": int,
    "radii": _tuple(float), "augment": int, "flip_prob": float, "max_rotation": float,
    "scale_range": _tuple(float), "shift_range": _tuple(float), "decoder": str,
    "r_schedule": _tuple(int), "ridge": _opt(float), "lr0": float, "batch_size": int,
    "patience": int, "max_epochs": int, "min_lr": float, "quantize": _opt(int),
    "iod": _opt(_tuple(int)), "mirror_map": _opt(_tuple(int)), "box_margin": float,
    "seed": int, "threads": int, "verbose": _bool,
}
assert set(PARSERS) == {f.name for f in dataclasses.fields(RunConfig)}


def set_value(cfg: RunConfig, key, value, where="override"):
    key = key.strip()
    if key not in PARSERS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        setattr(cfg, key, PARSERS[key](value.strip()))
    except ValueError:
        raise ConfigError(f"{where}: bad value {value.strip()!r} for {key}") from None


def validate(cfg: RunConfig):
    if cfg.decoder not in KINDS:
        raise ConfigError(f"decoder must be one of {', '.join(KINDS)}")
    for key in ("scale_range", "shift_range"):
        v = getattr(cfg, key)
        if len(v) != 2 or v[0] > v[1]:
            raise ConfigError(f"{key} must be 'low, high'")
    if cfg.quantize is not None and not 2 <= cfg.quantize <= 8:
        raise ConfigError("quantize must lie in [2, 8]")
    if cfg.iod is not None and len(cfg.iod) != 2:
        raise ConfigError("iod needs two landmark indices")
    if cfg.threads < 1:
        raise ConfigError("threads must be positive")
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        for n, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected 'key = value'")
            key, value = line.split("=", 1)
            set_value(cfg, key, value, f"{path}:{n}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        set_value(cfg, key, value)
    return validate(cfg)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            v = "none"
        elif isinstance(v, tuple):
            v = ", ".join(map(str, v))
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
