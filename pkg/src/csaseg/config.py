"""Flat ``key=value`` config files mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError


def read_kv(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def coerce(key: str, raw, hint):
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
            if raw.lower() in ("none", ""):
                return None
            return coerce(key, raw, next(a for a in args if a is not type(None)))
        if origin is tuple:
            items = [v for v in raw.replace(",", " ").split() if v]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(args[0](v) for v in items)
            if len(items) == 1 and len(args) > 1:
                items = items * len(args)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return tuple(t(v) for t, v in zip(args, items))
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if hint in (int, float, str):
            return hint(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for key '{key}': {raw!r} ({exc})") from exc
    raise ConfigError(f"key '{key}' has an unsupported type {hint}")


def build(cls, values: dict | None = None, **overrides):
    """Instantiate dataclass ``cls`` from string (or typed) values; unknown keys raise."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    merged = dict(values or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    for key, raw in merged.items():
        if key not in names:
            raise ConfigError(f"unknown config key '{key}' for {cls.__name__}")
        kwargs[key] = coerce(key, raw, hints[key])
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load(cls, path=None, **overrides):
    return build(cls, read_kv(path) if path else {}, **overrides)


def dump(obj) -> str:
    """Serialize a dataclass to ``key=value`` lines (tuples as comma lists)."""
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
