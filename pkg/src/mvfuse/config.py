"""Strict config parsing shared by the library and the CLI.

Configs are plain dataclasses.  :func:`from_dict` builds one from a JSON/TOML
mapping and rejects unknown keys so typos in config files fail loudly;
:func:`as_dict` produces the JSON-safe echo written next to every run.
"""

from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


def from_dict(cls, data: dict, where: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if not dataclasses.is_dataclass(cls):
        raise TypeError(f"{cls} is not a dataclass")
    where = where or cls.__name__
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        ftype = names[key].type
        kwargs[key] = _coerce(value, ftype, f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _coerce(value, ftype, where):
    # dataclass field types arrive as strings under `from __future__ annotations`
    if isinstance(ftype, str):
        base = ftype.split("[")[0].strip()
        if base in ("tuple", "Tuple") and isinstance(value, (list, tuple)):
            return tuple(value)
        if base == "int" and isinstance(value, float) and value.is_integer():
            return int(value)
        return value
    origin = typing.get_origin(ftype)
    if origin is tuple and isinstance(value, (list, tuple)):
        return tuple(value)
    if ftype is int and isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def as_dict(obj) -> dict:
    """JSON-safe dict echo of a dataclass (tuples serialized as lists)."""
    def convert(v):
        if dataclasses.is_dataclass(v) and not isinstance(v, type):
            return as_dict(v)
        if isinstance(v, (list, tuple)):
            return [convert(x) for x in v]
        return v

    return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
