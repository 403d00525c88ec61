from __future__ import annotations

import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class Settings:
    """Process-level configuration loaded from environment variables."""

    num_threads: int

    @classmethod
    def load(cls) -> "Settings":
        # Load .env file if present (no-op if not)
        try:
            load_dotenv()
        except Exception:
            pass

        raw = os.getenv("MCNET_NUM_THREADS", "1")
        try:
            num_threads = max(1, int(raw))
        except ValueError:
            num_threads = 1
        return cls(num_threads=num_threads)


settings = Settings.load()


def _line_of(text: str, key: str, table: str | None = None) -> int:
    """Best-effort 1-based line number of ``key = ...`` (inside ``[table]`` if given)."""
    current: str | None = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped.strip("[]").strip()
            continue
        if table is not None and current != table:
            continue
        if stripped.split("=", 1)[0].strip() == key:
            return number
    return 0


@dataclass
class ConfigDocument:
    """A parsed TOML file that remembers its text for line-level messages."""

    path: Path
    text: str
    data: dict[str, Any]

    @classmethod
    def read(cls, path: str | Path) -> "ConfigDocument":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"{path}: cannot read config file: {e}") from e
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            # tomllib already reports "(at line N, column M)"
            raise ConfigError(f"{path}: {e}") from e
        return cls(path=path, text=text, data=data)

    def table(self, name: str) -> dict[str, Any]:
        value = self.data.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"{self.path}:{_line_of(self.text, name)}: '{name}' must be a table")
        return value

    def error(self, table: str, key: str, message: str) -> ConfigError:
        line = _line_of(self.text, key, table)
        return ConfigError(f"{self.path}:{line}: [{table}] {key}: {message}")


def apply_overrides(target: Any, values: dict[str, Any], doc: ConfigDocument | None = None, table: str = "") -> Any:
    """Return a copy of dataclass ``target`` with ``values`` applied.

    Keys must name dataclass fields; lists become tuples so configs stay hashable.
    """
    known = {f.name: f for f in fields(target)}
    updates: dict[str, Any] = {}
    for key, value in values.items():
        if key not in known:
            message = f"unknown key (expected one of: {', '.join(sorted(known))})"
            if doc is not None:
                raise doc.error(table, key, message)
            raise ConfigError(f"{key}: {message}")
        if isinstance(value, list):
            value = tuple(value)
        updates[key] = value
    try:
        return type(target)(**{**{f: getattr(target, f) for f in known}, **updates})
    except (ConfigError, TypeError, ValueError) as e:
        bad = next(iter(updates), table)
        for key in updates:
            if key in str(e):
                bad = key
                break
        if doc is not None:
            raise doc.error(table, bad, str(e)) from e
        raise ConfigError(str(e)) from e
