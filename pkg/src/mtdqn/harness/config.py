"""Experiment configuration: nested dataclasses, JSON loading and the paper-scale preset."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from mtdqn.agent import AgentConfig
from mtdqn.environment import WorldConfig
from mtdqn.errors import ConfigurationError, MTDQNError, ValidationError
from mtdqn.fusion import FusionConfig
from mtdqn.temporal_graph import TgnnConfig

VARIANTS = ("MT-DQN", "-Transformer", "-TGNN", "-DQN", "Concat-Modal", "Vanilla-DQN")


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 1e-3
    lr_min: float = 1e-5
    clip_norm: float = 5.0

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr0:
            raise ConfigurationError("need 0 < optim.lr_min <= optim.lr0")
        if self.clip_norm <= 0:
            raise ConfigurationError("optim.clip_norm must be positive")


@dataclass(frozen=True)
class RewardConfig:
    lambda1: float = 0.3
    lambda2: float = 0.2

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("reward weights must be nonnegative")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    train_every: int = 1
    eval_rounds: int = 10
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(x) for x in self.split))
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigurationError(f"training.split must be three nonnegative ratios summing to 1, got {self.split}")
        if self.epochs < 0 or self.train_every < 1 or self.eval_rounds < 1:
            raise ConfigurationError("training counts must be positive (epochs may be 0)")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    graph: TgnnConfig = field(default_factory=TgnnConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0
    variant: str = "MT-DQN"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        w, f = self.world, self.fusion
        if (w.d_v, w.d_t, w.d_a) != (f.d_v, f.d_t, f.d_a):
            raise ConfigurationError(
                f"fusion input dims {(f.d_v, f.d_t, f.d_a)} differ from world modality dims {(w.d_v, w.d_t, w.d_a)}"
            )
        if self.graph.d_g != f.d_model:
            raise ConfigurationError(
                f"graph.d_g={self.graph.d_g} must equal fusion.d_model={f.d_model} (videos enter the graph as fused vectors)"
            )

    def with_variant(self, variant: str) -> "ExperimentConfig":
        return dataclasses.replace(self, variant=variant)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed, world=dataclasses.replace(self.world, seed=seed))


def config_to_dict(cfg) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = config_to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    text = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(text: str, path: str) -> str:
    line = _line_of(text, path.rsplit(".", 1)[-1])
    return f"{path!r}" + (f" (line {line})" if line else "")


def _build(cls, data: dict[str, Any], text: str, prefix: str, base=None):
    if not isinstance(data, dict):
        raise ValidationError(f"{_where(text, prefix)} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ValidationError(f"unknown key {_where(text, prefix + '.' + key if prefix else key)}")
    kwargs = {}
    for name, f in names.items():
        path = f"{prefix}.{name}" if prefix else name
        current = getattr(base, name) if base is not None else None
        if name not in data:
            if current is not None:
                kwargs[name] = current
            continue
        value = data[name]
        sub_default = current
        if sub_default is None and f.default_factory is not dataclasses.MISSING:
            sub_default = f.default_factory()
        if dataclasses.is_dataclass(sub_default):
            kwargs[name] = _build(type(sub_default), value, text, path, sub_default)
            continue
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (MTDQNError, TypeError) as exc:
        where = f"section {_where(text, prefix)}" if prefix else "top level"
        raise ValidationError(f"{where}: {exc}") from None


def paper_preset() -> ExperimentConfig:
    """Paper-scale hyperparameters on top of the desk-scale world."""
    return ExperimentConfig(
        fusion=FusionConfig(d_model=768, n_heads=12, n_layers=6, dropout=0.2),
        graph=TgnnConfig(widths=(64, 128, 256), d_g=768),
        agent=AgentConfig(hidden=(512, 256, 128), gamma=0.95, sync_every=1000,
                          buffer_capacity=100_000, batch_size=64, dropout=0.2),
        optim=OptimConfig(lr0=1e-3),
        training=TrainingConfig(epochs=50),
    )


def parse_config(text: str, preset: str | None = None) -> ExperimentConfig:
    """Parse JSON config text; an empty document means all defaults."""
    if preset not in (None, "desk", "paper"):
        raise ValidationError(f"unknown preset {preset!r}")
    data: dict[str, Any] = {}
    if text.strip():
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if isinstance(data, dict) and "preset" in data:
        file_preset = data.pop("preset")
        preset = preset or file_preset
        if preset not in ("desk", "paper"):
            raise ValidationError(f"unknown preset {preset!r} {_where(text, 'preset')}")
    base = paper_preset() if preset == "paper" else ExperimentConfig()
    cfg = _build(ExperimentConfig, data, text, "", base)
    return cfg.with_seed(cfg.seed) if "world" not in data or "seed" not in data.get("world", {}) else cfg


def load_config(path: str | Path | None, preset: str | None = None) -> ExperimentConfig:
    if path is None:
        return parse_config("", preset)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, preset)
