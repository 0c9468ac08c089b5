"""Flat ``key=value`` configuration files.

Blank lines and ``#`` comments are ignored.  Values are kept as strings here;
each config dataclass converts its own fields through :func:`coerce_into`.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping

from .errors import FormatError, ValidationError


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def format_kv(values: Mapping[str, Any]) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in values.items())


def write_kv(path, values: Mapping[str, Any]) -> None:
    Path(path).write_text(format_kv(values), encoding="utf-8")


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _convert(text: str, kind: type, key: str):
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
        if kind is tuple:
            return tuple(int(s) for s in text.split(",") if s.strip())
        return text
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot read {text!r} as {kind.__name__}") from None


def coerce_into(cls, values: Mapping[str, str], *, strict: bool = True, **fixed):
    """Build dataclass ``cls`` from string values, using field defaults for the rest."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dict(fixed)
    for key, text in values.items():
        if key not in fields:
            if strict:
                raise ValidationError(f"unknown config key {key!r} for {cls.__name__}")
            continue
        if key in fixed:
            continue
        default = fields[key].default
        kind = type(default) if default is not dataclasses.MISSING and default is not None else str
        kwargs[key] = _convert(str(text), kind, key)
    return cls(**kwargs)


def to_flat(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))}
