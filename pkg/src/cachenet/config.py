"""Flat ``key = value`` config files.

Blank lines and lines starting with ``#`` are ignored. Values stay strings;
callers coerce them against a schema of defaults.
"""
from __future__ import annotations

from pathlib import Path

from .utils import atomic_write_text


class ConfigError(ValueError):
    pass


def parse_config(text: str, source="<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def write_config(path, values: dict):
    atomic_write_text(path, "".join(f"{k} = {v}\n" for k, v in values.items()))


def coerce(values: dict, defaults: dict) -> dict:
    """Merge ``values`` over ``defaults``, converting each to the default's type."""
    out = dict(defaults)
    for key, raw in values.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        default = defaults[key]
        try:
            if isinstance(default, bool):
                low = str(raw).lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(raw)
                out[key] = low in ("1", "true", "yes")
            elif isinstance(default, tuple):
                out[key] = tuple(type(default[0])(v) for v in str(raw).split(",") if v.strip()) \
                    if not isinstance(raw, tuple) else raw
            elif default is None:
                out[key] = None if str(raw).lower() in ("", "none") else int(raw)
            else:
                out[key] = type(default)(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return out
