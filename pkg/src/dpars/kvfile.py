"""Tiny `key = value` config-file reader/writer.

Lines starting with '#' and blank lines are ignored. Values stay strings;
callers coerce them against their own schema.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_kv(path, items: dict, header: str | None = None) -> None:
    lines = []
    if header:
        lines.append(f"# {header}")
    for key, value in items.items():
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
