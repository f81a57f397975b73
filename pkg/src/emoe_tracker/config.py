"""Run configuration: one nested document covering every module.

Precedence, lowest to highest: dataclass defaults, ``--config`` YAML file,
the ``EMOE_SEED`` environment variable (seeds only), explicit CLI flags.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

ATTRIBUTE_NAMES = ("illumination_variation", "motion_blur", "scale_variance", "occlusion")
INSERT_INTERVALS = (1, 2, 4, 6, 12)


@dataclass
class DataConfig:
    template_size: int = 64
    search_size: int = 128
    template_factor: float = 2.0
    search_factor: float = 4.0
    # jitter applied to the search crop during training, in units of box side
    center_jitter: float = 0.25
    scale_jitter: float = 0.15


@dataclass
class ModelConfig:
    dim: int = 64
    depth: int = 4
    heads: int = 4
    patch: int = 16
    mlp_ratio: float = 4.0
    head_channels: int = 64
    header_unfrozen: bool = False
    init_seed: int = 0


@dataclass
class EmoeConfig:
    enabled: bool = True
    num_experts: int = 4
    insert_interval: int = 1
    hidden_ratio: int = 2


@dataclass
class CrmConfig:
    enabled: bool = True
    tau: float = 0.07
    feeds_head: bool = False


@dataclass
class LossConfig:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    alpha: float = 1.0
    beta: float = 1.0
    regress_at: str = "gt"


@dataclass
class OptimConfig:
    lr: float = 3e-3
    weight_decay: float = 1e-4
    decay_epoch_frac: float = 32 / 60
    grad_clip: float = 0.0


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    steps: int = 300
    steps_per_epoch: int = 30
    validate: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    emoe: EmoeConfig = field(default_factory=EmoeConfig)
    crm: CrmConfig = field(default_factory=CrmConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        d, m, e = self.data, self.model, self.emoe
        if d.template_size % m.patch or d.search_size % m.patch:
            raise ConfigError("template_size and search_size must be multiples of model.patch")
        if m.dim % m.heads:
            raise ConfigError("model.dim must be divisible by model.heads")
        if m.depth < 1 or m.dim < 1 or m.patch < 1:
            raise ConfigError("model.depth, model.dim and model.patch must be positive")
        if e.num_experts < 1:
            raise ConfigError("emoe.num_experts must be >= 1")
        if e.num_experts > len(ATTRIBUTE_NAMES):
            raise ConfigError(f"emoe.num_experts cannot exceed {len(ATTRIBUTE_NAMES)} annotated attributes")
        if e.insert_interval not in INSERT_INTERVALS:
            raise ConfigError(f"emoe.insert_interval must be one of {INSERT_INTERVALS}")
        if e.hidden_ratio < 1:
            raise ConfigError("emoe.hidden_ratio must be >= 1")
        if self.crm.tau <= 0:
            raise ConfigError("crm.tau must be positive")
        for k, v in dataclasses.asdict(self.loss).items():
            if k != "regress_at" and v < 0:
                raise ConfigError(f"loss.{k} must be non-negative")
        if self.loss.regress_at not in ("gt", "argmax"):
            raise ConfigError("loss.regress_at must be 'gt' or 'argmax'")
        if self.optim.lr <= 0 or self.optim.weight_decay < 0:
            raise ConfigError("optim.lr must be positive and optim.weight_decay non-negative")
        if self.optim.grad_clip < 0:
            raise ConfigError("optim.grad_clip must be non-negative (0 disables clipping)")
        if not 0.0 < self.optim.decay_epoch_frac <= 1.0:
            raise ConfigError("optim.decay_epoch_frac must be in (0, 1]")
        t = self.train
        if t.batch_size < 1 or t.steps < 1 or t.steps_per_epoch < 1:
            raise ConfigError("train.batch_size, train.steps and train.steps_per_epoch must be positive")
        return self

    @property
    def injected_layers(self) -> list[int]:
        return injected_layers(self.model.depth, self.emoe.insert_interval) if self.emoe.enabled else []

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        return _build(cls, doc or {}, "").validate()

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
        return cls.from_dict(doc)

    def override(self, dotted: dict) -> "RunConfig":
        """Return a copy with ``{"section.key": value}`` overrides applied."""
        doc = self.to_dict()
        for key, value in dotted.items():
            section, _, name = key.partition(".")
            if section not in doc or name not in doc[section]:
                raise ConfigError(f"unknown config key {key!r}")
            doc[section][name] = value
        return RunConfig.from_dict(doc)

    @classmethod
    def full_scale_preset(cls) -> "RunConfig":
        """Full-scale recipe: 12 layers, batch 64, 60 epochs, step decay after epoch 32."""
        cfg = cls()
        cfg.model.depth = 12
        cfg.model.dim = 768
        cfg.model.heads = 12
        cfg.data.template_size = 128
        cfg.data.search_size = 256
        cfg.train.batch_size = 64
        cfg.train.steps_per_epoch = 60000 // 64
        cfg.train.steps = 60 * cfg.train.steps_per_epoch
        cfg.optim.lr = 2e-4
        return cfg.validate()

    @classmethod
    def desk_preset(cls) -> "RunConfig":
        """Laptop-scale recipe used by the tests and the toy-overfit check."""
        return cls().validate()


def injected_layers(depth: int, interval: int) -> list[int]:
    """1-based encoder layers that receive an eMoE injection."""
    layers = [l for l in range(1, depth + 1) if l % interval == 0]
    return layers or [depth]


def seed_from_env(default: int) -> int:
    raw = os.environ.get("EMOE_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"EMOE_SEED must be an integer, got {raw!r}") from exc


def _build(cls, doc, prefix):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in fields.items():
        if name not in doc:
            continue
        value = doc[name]
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, type(current), prefix + name)
    return cls(**kwargs)


def _coerce(value, typ, key):
    if typ is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be a boolean, got {value!r}")
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, str):
            # PyYAML reads "1e-3" (no dot) as a string
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if typ is str and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value
