"""key=value configuration files (INI sections) mapped onto dataclasses.

Unknown keys are errors. Precedence when merging is defaults, then file,
then explicit overrides.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .errors import InvalidConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_scalar(kind, text: str):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text
    raise TypeError(f"unsupported config type {kind}")


def parse_value(hint, text: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        if text.strip().lower() in ("", "none"):
            return None
        return parse_value(inner[0], text)
    if origin is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(args[0], t) for t in items)
        if len(items) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse_scalar(a, t) for a, t in zip(args, items))
    return _parse_scalar(hint, text)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def to_section(obj) -> dict[str, str]:
    return {f.name: format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def from_section(cls, mapping: Mapping[str, str], base=None, section: str = ""):
    """Build ``cls`` from string values layered over ``base`` (or defaults)."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(mapping) - known)
    if unknown:
        where = f" in [{section}]" if section else ""
        raise InvalidConfig(f"unknown config key(s){where}: {', '.join(unknown)}")
    values: dict[str, Any] = {}
    for key, text in mapping.items():
        try:
            values[key] = parse_value(hints[key], text)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(f"bad value for {key}: {exc}") from None
    if base is not None:
        return dataclasses.replace(base, **values)
    return cls(**values)


def read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise InvalidConfig(f"cannot parse config {path}: {exc}") from exc
    return parser


def section_dict(parser: configparser.ConfigParser, name: str) -> dict[str, str]:
    return dict(parser[name]) if parser.has_section(name) else {}


def check_sections(parser: configparser.ConfigParser, allowed) -> None:
    extra = sorted(set(parser.sections()) - set(allowed))
    if extra:
        raise InvalidConfig(f"unknown config section(s): {', '.join(extra)}")


def write_ini(path, sections: Mapping[str, Mapping[str, str]]) -> Path:
    """Deterministic writer: sections and keys in the order given."""
    lines = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in body.items())
        lines.append("")
    path = Path(path)
    path.write_text("\n".join(lines))
    return path
