"""Flat ``key = value`` configuration files with an ``include`` directive.

Lines are ``key = value``; ``#`` starts a comment; ``include other.cfg``
merges another file (relative to the including file) at that point, and
later keys override earlier ones.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


def parse_config(path, _seen: Optional[set] = None) -> dict[str, str]:
    path = Path(path).resolve()
    seen = _seen if _seen is not None else set()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    seen.add(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include ") or line.startswith("include\t"):
            target = line[len("include"):].strip()
            out.update(parse_config(path.parent / target, seen))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    seen.discard(path)
    return out


def dump_config(values: dict) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


def split_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]
