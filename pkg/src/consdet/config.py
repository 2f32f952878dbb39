"""Experiment configuration: ``section.key = value`` text files.

Lists are comma separated, booleans are ``true``/``false``, ``#`` starts a
comment.  Unknown keys and malformed values raise :class:`ConfigError`, so a
typo in an ablation config can never silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from .anchors import AnchorConfig
from .detector import ModelConfig
from .inference import InferenceConfig
from .losses import LossConfig
from .synthdata import SceneSpec
from .targets import STAGE1_DEFAULT, STAGE2_DEFAULT, STAGE3_DEFAULT, MatchThresholds


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSection:
    strides: tuple[int, ...] = (8, 16)
    base_sizes: tuple[float, ...] = (16.0, 32.0)
    scales: tuple[float, ...] = (1.0, 2 ** 0.5)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def build(self) -> AnchorConfig:
        if len(self.strides) != len(self.base_sizes):
            raise ValueError("anchors.strides and anchors.base_sizes need the same length")
        return AnchorConfig(tuple(zip(self.strides, self.base_sizes)), self.scales, self.ratios)


@dataclass(frozen=True)
class SplitSection:
    train: int = 500
    val: int = 100
    test: int = 100

    def count(self, split: str) -> int:
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    flip_augment: bool = False
    warmup_steps: int = 100
    warmup_factor: float = 1.0 / 3.0
    lr_decay_steps: tuple[int, ...] = (1500, 1850)
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("lr and steps must be >= 0 and batch_size >= 1")

    def lr_at(self, step: int) -> float:
        lr = self.lr * self.lr_decay_factor ** sum(step >= s for s in self.lr_decay_steps)
        if step < self.warmup_steps:
            frac = step / self.warmup_steps
            lr *= self.warmup_factor * (1 - frac) + frac
        return lr


@dataclass(frozen=True)
class ExperimentConfig:
    anchors: AnchorSection = field(default_factory=AnchorSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: MatchThresholds = STAGE1_DEFAULT
    stage2: MatchThresholds = STAGE2_DEFAULT
    stage3: MatchThresholds = STAGE3_DEFAULT
    loss: LossConfig = field(default_factory=LossConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    data: SceneSpec = field(default_factory=SceneSpec)
    splits: SplitSection = field(default_factory=SplitSection)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    @property
    def anchor_config(self) -> AnchorConfig:
        return self.anchors.build()

    @property
    def thresholds(self) -> list[MatchThresholds]:
        return [self.stage1, self.stage2, self.stage3]

    def as_baseline(self) -> "ExperimentConfig":
        """Same experiment with the consistent terms switched off."""
        return dataclasses.replace(
            self,
            loss=dataclasses.replace(self.loss, alpha=0.0, num_reg_stages=1),
            inference=dataclasses.replace(self.inference, apply_second_regression=False),
        )

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        return _apply(self, overrides)


def _parse_scalar(text: str, typ, key: str):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {typ}")


def _parse_value(text: str, typ, key: str):
    origin = typing.get_origin(typ)
    if origin is tuple:
        (elem, *_rest) = typing.get_args(typ)
        items = [t for t in text.split(",") if t.strip()]
        return tuple(_parse_scalar(t, elem, key) for t in items)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text.strip().lower() in ("none", ""):
            return None
        return _parse_value(text, args[0], key)
    return _parse_scalar(text, typ, key)


def _apply(cfg: ExperimentConfig, assignments: dict[str, str]) -> ExperimentConfig:
    sections: dict[str, dict] = {}
    hints = typing.get_type_hints(ExperimentConfig)
    for key, text in assignments.items():
        parts = key.split(".")
        if len(parts) != 2 or parts[0] not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        sec, name = parts
        sec_hints = typing.get_type_hints(hints[sec])
        if name not in sec_hints or name not in {f.name for f in dataclasses.fields(hints[sec])}:
            raise ConfigError(f"unknown config key {key!r}")
        sections.setdefault(sec, {})[name] = _parse_value(text, sec_hints[name], key)
    updates = {}
    for sec, values in sections.items():
        try:
            updates[sec] = dataclasses.replace(getattr(cfg, sec), **values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{sec}] {exc}") from None
    out = dataclasses.replace(cfg, **updates)
    try:
        out.anchor_config
    except ValueError as exc:
        raise ConfigError(f"[anchors] {exc}") from None
    return out


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    assignments = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in assignments:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        assignments[key] = value
    return _apply(base or ExperimentConfig(), assignments)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Every key with its current value; parses back to an equal config."""
    lines = []
    for sec in dataclasses.fields(cfg):
        obj = getattr(cfg, sec.name)
        for f in dataclasses.fields(obj):
            lines.append(f"{sec.name}.{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
