"""Strict dataclass <-> dict conversion for config files, plus config hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


def _convert(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint) and isinstance(value, Mapping):
        return dataclass_from_dict(hint, value, path)
    if origin in (tuple, list):
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if origin is tuple and args and args[-1] is Ellipsis:
            inner = args[0]
            return tuple(_convert(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
        return tuple(value) if origin is tuple else list(value)
    if origin is typing.Union or origin is getattr(typing, "UnionType", None) or str(origin) == "<class 'types.UnionType'>":
        for arg in typing.get_args(hint):
            if arg is type(None) and value is None:
                return None
            if dataclasses.is_dataclass(arg) and isinstance(value, Mapping):
                return dataclass_from_dict(arg, value, path)
        return value
    if hint is float and isinstance(value, int):
        return float(value)
    return value


def dataclass_from_dict(cls, data: Mapping, path: str = "") -> Any:
    """Build a dataclass from a mapping; unknown keys raise, naming the key."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r} in {path or cls.__name__}")
        kwargs[key] = _convert(value, hints.get(key, Any), f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def dataclass_to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: dataclass_to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Mapping):
        return {k: dataclass_to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [dataclass_to_dict(v) for v in obj]
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(dataclass_to_dict(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]
