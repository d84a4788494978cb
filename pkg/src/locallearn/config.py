"""Run configuration: a line-based ``key = value`` file with ``[section]`` headers.

Sections are ``plan`` (every :class:`TrainPlan` field), ``data``, ``probe`` and
``output``.  Blank lines and lines starting with ``#`` are ignored.  Values are
typed by the field they set; tuples are comma-separated and ``none`` clears an
optional field.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .train import TrainPlan


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass
class DataSpec:
    source: str = "digits"          # digits | idx
    label: str = "y1"
    n_train: int = 2000
    n_test: int = 1000
    image_size: int = 16
    n_backgrounds: int = 10
    n_positions: int = 16
    seed: int = 123
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class ProbeSpec:
    layers: str = "modules"         # "modules" (each module boundary) or comma-separated layer indices
    labels: tuple = ("y1", "y2", "y3")
    decoder_epochs: int = 10
    classifier_epochs: int = 15
    linear_epochs: int = 60
    seed: int = 0


@dataclass
class OutputSpec:
    directory: str = "runs/default"


@dataclass
class RunConfig:
    plan: TrainPlan = field(default_factory=TrainPlan)
    data: DataSpec = field(default_factory=DataSpec)
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    output: OutputSpec = field(default_factory=OutputSpec)


SECTIONS = {"plan": TrainPlan, "data": DataSpec, "probe": ProbeSpec, "output": OutputSpec}


def _kind(cls, name: str):
    hint = typing.get_type_hints(cls)[name]
    args = typing.get_args(hint)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    return typing.get_origin(base) or base, optional


def _number(conv, text: str, what: str):
    try:
        return conv(text)
    except ValueError:
        raise ValueError(f"expected {what}, got {text!r}") from None


def _parse_value(cls, name: str, raw: str):
    kind, optional = _kind(cls, name)
    text = raw.strip()
    if optional and text.lower() == "none":
        return None
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return low == "true"
    if kind is int:
        return _number(int, text, "an integer")
    if kind is float:
        return _number(float, text, "a number")
    if kind is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        if name == "widths":
            return tuple(_number(int, t, "an integer") for t in items)
        return tuple(items)
    return text


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"unterminated section header {s!r}", source, lineno)
            section = s[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SECTIONS)}", source, lineno)
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", source, lineno)
        if section is None:
            raise ConfigError("key outside any [section]", source, lineno)
        key, raw = (p.strip() for p in s.split("=", 1))
        cls = SECTIONS[section]
        if key not in {f.name for f in fields(cls)}:
            raise ConfigError(f"[{section}] unknown key {key!r}", source, lineno)
        if key in values[section]:
            raise ConfigError(f"[{section}] duplicate key {key!r}", source, lineno)
        try:
            values[section][key] = _parse_value(cls, key, raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}", source, lineno) from None
    cfg = RunConfig(**{name: cls(**values[name]) for name, cls in SECTIONS.items()})
    try:
        cfg.plan.validate()
    except ValueError as exc:
        raise ConfigError(f"[plan] {exc}", source) from None
    if cfg.data.source not in ("digits", "idx"):
        raise ConfigError(f"[data] source must be 'digits' or 'idx', got {cfg.data.source!r}", source)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        lines += [f"{f.name} = {_format_value(getattr(obj, f.name))}" for f in fields(obj)]
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
