"""Plain-text ``key = value`` configuration files.

Schema
------
* one ``key = value`` pair per line; ``#`` starts a comment;
* keys are dotted paths (``cert.mu``, ``estimator.two_stage.horizon``);
* scalars are written as Python literals (``0.48``, ``30``, ``true``);
* vectors are comma separated (``0.0013, 0.09, 0.09``);
* matrices separate rows with ``;`` (``1, 0; 0, 1``);
* lists of names are comma separated words (``full_order, two_stage``).

Floats are written with ``repr`` so a dump/load roundtrip is exact.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError

_MISSING = object()


class Config:
    """Flat mapping of dotted keys to raw string values with typed getters."""

    def __init__(self, values: Mapping[str, str] | None = None, source: str = "<memory>"):
        self._values = {str(k): str(v) for k, v in (values or {}).items()}
        self.source = source

    def __contains__(self, key):
        return key in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def keys(self):
        return self._values.keys()

    def items(self):
        return self._values.items()

    def raw(self, key, default=_MISSING) -> str:
        if key in self._values:
            return self._values[key]
        if default is _MISSING:
            raise ConfigError(f"{self.source}: missing key '{key}'")
        return default

    def set(self, key: str, value) -> None:
        self._values[key] = format_value(value)

    def update(self, other: "Config | Mapping") -> None:
        for k, v in other.items():
            self._values[k] = str(v)

    def section(self, prefix: str) -> "Config":
        """Sub-config with ``prefix.`` stripped from the keys."""
        p = prefix.rstrip(".") + "."
        return Config({k[len(p):]: v for k, v in self._values.items() if k.startswith(p)}, f"{self.source}[{prefix}]")

    def get_str(self, key, default=_MISSING) -> str:
        if key not in self._values and default is not _MISSING:
            return default
        return self.raw(key).strip()

    def get_float(self, key, default=_MISSING) -> float:
        if key not in self._values and default is not _MISSING:
            return default
        try:
            return float(self.raw(key))
        except ValueError as exc:
            raise ConfigError(f"{self.source}: '{key}' is not a number: {self.raw(key)!r}") from exc

    def get_int(self, key, default=_MISSING) -> int:
        if key not in self._values and default is not _MISSING:
            return default
        value = self.get_float(key)
        if value != int(value):
            raise ConfigError(f"{self.source}: '{key}' must be an integer, got {value}")
        return int(value)

    def get_bool(self, key, default=_MISSING) -> bool:
        if key not in self._values and default is not _MISSING:
            return default
        text = self.raw(key).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{self.source}: '{key}' is not a boolean: {text!r}")

    def get_vector(self, key, default=_MISSING) -> np.ndarray:
        if key not in self._values and default is not _MISSING:
            return default
        try:
            return np.array([float(t) for t in self.raw(key).split(",") if t.strip()], dtype=float)
        except ValueError as exc:
            raise ConfigError(f"{self.source}: '{key}' is not a numeric vector") from exc

    def get_matrix(self, key, default=_MISSING) -> np.ndarray:
        if key not in self._values and default is not _MISSING:
            return default
        rows = [r for r in self.raw(key).split(";") if r.strip()]
        try:
            mat = [[float(t) for t in r.split(",") if t.strip()] for r in rows]
        except ValueError as exc:
            raise ConfigError(f"{self.source}: '{key}' is not a numeric matrix") from exc
        if len({len(r) for r in mat}) > 1:
            raise ConfigError(f"{self.source}: '{key}' has ragged rows")
        return np.array(mat, dtype=float).reshape(len(mat), -1 if mat else 0)

    def get_list(self, key, default=_MISSING) -> list[str]:
        if key not in self._values and default is not _MISSING:
            return default
        return [t.strip() for t in self.raw(key).split(",") if t.strip()]

    def to_text(self) -> str:
        return dump_config(self._values)


def format_value(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    arr = np.asarray(value)
    if arr.ndim == 1:
        return ", ".join(format_value(v.item()) for v in arr)
    if arr.ndim == 2:
        return "; ".join(", ".join(format_value(v.item()) for v in row) for row in arr)
    if isinstance(value, Iterable):
        return ", ".join(format_value(v) for v in value)
    raise TypeError(f"cannot format {type(value).__name__} as a config value")


def parse_config(text: str, source: str = "<string>") -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return Config(values, source)


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def dump_config(values: Mapping) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def save_config(values: Mapping | Config, path) -> None:
    text = values.to_text() if isinstance(values, Config) else dump_config(values)
    Path(path).write_text(text)


def update_config_file(path, values: Mapping) -> None:
    """Rewrite the given keys in place, keeping comments and key order.

    Keys not yet present are appended at the end.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    pending = {k: format_value(v) for k, v in values.items()}
    for i, line in enumerate(lines):
        body, sep, comment = line.partition("#")
        if "=" not in body:
            continue
        key = body.split("=", 1)[0].strip()
        if key in pending:
            tail = f"  #{comment}" if sep else ""
            lines[i] = f"{key} = {pending.pop(key)}{tail}"
    lines += [f"{k} = {v}" for k, v in pending.items()]
    path.write_text("\n".join(lines) + "\n")
