"""Flat ``key = value`` config files for :class:`TrainConfig`.

Example::

    # cvae with a smaller batch
    model = cvae_l1
    batch_size = 32
    adam_betas = 0.5, 0.999
    ivae.m = 120

Nested fields use dotted keys. ``none`` clears an optional field.
Precedence is built-in defaults < config file < overrides.
"""

from __future__ import annotations

import typing
from dataclasses import fields
from pathlib import Path
from typing import Dict, Iterable, Optional

from chromagen.training import IvaeConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _field_types(cls) -> Dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _coerce(key: str, raw: str, tp):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if raw.lower() in ("none", "null", ""):
            return None
        tp = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(tp), typing.get_args(tp)
    try:
        if tp is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin is tuple:
            parts = [p for p in raw.strip("()[] ").split(",") if p.strip()]
            if len(parts) != len(args):
                raise ValueError(raw)
            return tuple(_coerce(key, p, a) for p, a in zip(parts, args))
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _schema() -> Dict[str, object]:
    schema = {}
    for name, tp in _field_types(TrainConfig).items():
        if tp is IvaeConfig:
            for sub, sub_tp in _field_types(IvaeConfig).items():
                schema[f"{name}.{sub}"] = sub_tp
        else:
            schema[name] = tp
    return schema


SCHEMA = _schema()


def parse_assignments(lines: Iterable[str], origin: str = "config") -> Dict[str, object]:
    values: Dict[str, object] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(
                f"{origin}:{lineno}: unknown key {key!r}; known keys: {', '.join(sorted(SCHEMA))}"
            )
        values[key] = _coerce(key, raw, SCHEMA[key])
    return values


def parse_overrides(overrides: Iterable[str]) -> Dict[str, object]:
    return parse_assignments(overrides, origin="--override")


def build_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Resolve defaults, then the file at ``path``, then ``overrides``; validates the result."""
    values: Dict[str, object] = {}
    if path is not None:
        values.update(parse_assignments(Path(path).read_text().splitlines(), origin=str(path)))
    values.update(parse_overrides(overrides))
    flat = {k: v for k, v in values.items() if "." not in k}
    nested = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("ivae.")}
    config = TrainConfig(**flat, ivae=IvaeConfig(**nested))
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return config


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def dump_config(config: TrainConfig) -> str:
    lines = []
    for key in SCHEMA:
        if "." in key:
            head, sub = key.split(".", 1)
            value = getattr(getattr(config, head), sub)
        else:
            value = getattr(config, key)
        lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"
