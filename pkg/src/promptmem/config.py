"""Training configuration with flat dotted keys.

Config files are plain ``key=value`` lines (``#`` starts a comment), e.g.::

    pdm.token.N=10
    adapt.prompt_lr=1e-3

Every key can be overridden with ``--set key=value`` or ``--key value`` on the
command line.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class DataConfig:
    root: str = "data"
    canvas: int = 64
    n_source: int = 500
    n_target: int = 500
    n_val: int = 200
    min_objects: int = 1
    max_objects: int = 4
    corruption: str = "fog"
    strength: float = 0.8
    seed: int = 0


@dataclass
class ModelConfig:
    dim: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    queries: int = 25
    classes: int = 3
    stride: int = 8
    ffn: int = 128


@dataclass
class LevelConfig:
    N: int = 10
    enabled: bool = True


@dataclass
class PdmConfig:
    input: LevelConfig = field(default_factory=LevelConfig)
    token: LevelConfig = field(default_factory=LevelConfig)
    query: LevelConfig = field(default_factory=LevelConfig)
    M: int = 4
    L: int = 8
    border: int = 4
    init_scale: float = 0.03
    strategy: str = "distribution"

    def levels(self) -> tuple[str, ...]:
        return tuple(lv for lv in ("input", "token", "query") if getattr(self, lv).enabled)


@dataclass
class PmaConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    reversal_scale: float = 1.0


@dataclass
class LossConfig:
    lambda_s: float = 1.0
    lambda_us: float = 1.0
    lambda_epa: float = 0.25
    lambda_dpa: float = 0.25
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 0.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class BurnInConfig:
    epochs: int = 40
    lr: float = 1e-3
    decay_epoch: int = 32
    decay_factor: float = 0.1
    train_pools: bool = False
    clip: float = 0.1
    warmup_steps: int = 250


@dataclass
class AdaptConfig:
    epochs: int = 10
    prompt_lr: float = 1e-3
    base_lr: float = 1e-4
    decay_epoch: int = 8
    decay_factor: float = 0.1
    alpha: float = 0.999
    threshold: float = 0.5
    clip: float = 0.1
    pseudo_every: str = "step"
    eval_model: str = "teacher"


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pdm: PdmConfig = field(default_factory=PdmConfig)
    pma: PmaConfig = field(default_factory=PmaConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    burn_in: BurnInConfig = field(default_factory=BurnInConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    batch_size: int = 4
    seed: int = 0
    seeds: str = "0,1,2"
    out: str = "runs/default"
    eval_iou: float = 0.5

    # -- flat view ----------------------------------------------------------

    def to_flat(self) -> dict[str, Any]:
        return _flatten(self)

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "TrainConfig":
        cfg = cls()
        cfg.update(flat)
        return cfg

    def update(self, flat: dict[str, Any]) -> "TrainConfig":
        known = self.to_flat()
        for key, raw in flat.items():
            key = key.replace("-", "_") if key.replace("-", "_") in known else key
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            obj, attr = _resolve(self, key)
            setattr(obj, attr, _coerce(raw, type(known[key]), key))
        self.validate()
        return self

    def copy(self) -> "TrainConfig":
        return TrainConfig.from_flat(self.to_flat())

    def seed_list(self) -> list[int]:
        return [int(s) for s in str(self.seeds).split(",") if s.strip()]

    def validate(self) -> None:
        for key, value in self.to_flat().items():
            if key.endswith(("lr", "epochs")) and not value > 0:
                raise ConfigError(f"{key} must be positive")
            if key.startswith("loss.lambda") and value < 0:
                raise ConfigError(f"{key} must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.pdm.strategy not in ("distribution", "random", "kmeans"):
            raise ConfigError(f"unknown selection strategy {self.pdm.strategy!r}")
        if self.adapt.pseudo_every not in ("step", "epoch"):
            raise ConfigError("adapt.pseudo_every must be 'step' or 'epoch'")
        if self.adapt.eval_model not in ("teacher", "student"):
            raise ConfigError("adapt.eval_model must be 'teacher' or 'student'")

    def dumps(self) -> str:
        return "\n".join(f"{k}={_fmt(v)}" for k, v in self.to_flat().items()) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), sort_keys=True)


def _flatten(obj, prefix: str = "") -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _resolve(cfg, key: str):
    parts = key.split(".")
    obj = cfg
    for p in parts[:-1]:
        obj = getattr(obj, p)
    return obj, parts[-1]


def _coerce(raw, kind, key):
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from exc
    return text


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg.update(parse_kv(p.read_text()))
    if overrides:
        cfg.update(overrides)
    return cfg
