"""
``key = value`` experiment files.

Keys are ``<section>.<field>`` where the section is one of ``synth``,
``model``, ``quantizer``, ``loss``, ``schedule``, ``optim`` or ``train``.
Blank lines and ``#`` comments are ignored; unknown or repeated keys are
errors. Every accepted file yields fully defaulted configs, and
:func:`dump_config` writes the canonical form that parses back unchanged.
"""

from __future__ import annotations

import dataclasses
import typing
from types import UnionType

from .data import SynthConfig
from .model import ModelConfig
from .train import LossWeights, OptimConfig, QuantizerConfig, ScheduleConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, lineno: int | None = None, source: str = "<config>"):
        self.lineno = lineno
        where = f"{source}:{lineno}: " if lineno is not None else f"{source}: "
        super().__init__(where + message)


# fields that are derived rather than configured
_SKIP = {("model", "n_subspaces")}
_SECTIONS = ("synth", "model", "quantizer", "loss", "schedule", "optim", "train")
_NESTED = {"model", "quantizer", "loss", "optim", "schedule"}


def _section_types():
    return {"synth": SynthConfig, "model": ModelConfig, "quantizer": QuantizerConfig,
            "loss": LossWeights, "schedule": ScheduleConfig, "optim": OptimConfig, "train": TrainConfig}


def _fields(section: str):
    cls = _section_types()[section]
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if (section, f.name) in _SKIP or f.name in _NESTED:
            continue
        yield f.name, hints[f.name]


def known_keys() -> list[str]:
    return [f"{s}.{name}" for s in _SECTIONS for name, _ in _fields(s)]


def _parse_value(text: str, hint):
    args = typing.get_args(hint)
    origin = typing.get_origin(hint)
    if origin in (typing.Union, UnionType):
        if text.lower() == "none" and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if origin is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(int(t) for t in items)
    if hint is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<config>") -> tuple[SynthConfig, TrainConfig]:
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    hints = {s: dict(_fields(s)) for s in _SECTIONS}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = (p.strip() for p in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in hints or name not in hints[section]:
            raise ConfigError(f"unknown key {key!r}", lineno, source)
        if key in seen:
            raise ConfigError(f"key {key!r} already set on line {seen[key]}", lineno, source)
        seen[key] = lineno
        try:
            values[section][name] = _parse_value(value, hints[section][name])
        except (ValueError, StopIteration) as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno, source) from None
    try:
        synth = SynthConfig(**values["synth"])
        schedule_defaults = LossWeights().schedule
        schedule = dataclasses.replace(schedule_defaults, **values["schedule"])
        train = TrainConfig(
            model=ModelConfig(**values["model"]),
            quantizer=QuantizerConfig(**values["quantizer"]),
            loss=LossWeights(**values["loss"], schedule=schedule),
            optim=OptimConfig(**values["optim"]),
            **values["train"],
        )
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        line = next((ln for key, ln in seen.items() if key in msg), None)
        raise ConfigError(msg, line, source) from None
    return synth, train


def dump_config(synth: SynthConfig | None = None, train: TrainConfig | None = None) -> str:
    """Canonical text with every key spelled out."""
    synth = synth or SynthConfig()
    train = train or TrainConfig()
    objs = {"synth": synth, "model": train.model, "quantizer": train.quantizer, "loss": train.loss,
            "schedule": train.loss.schedule, "optim": train.optim, "train": train}
    lines = []
    for section in _SECTIONS:
        for name, _ in _fields(section):
            lines.append(f"{section}.{name} = {_format_value(getattr(objs[section], name))}")
        lines.append("")
    return "\n".join(lines)
