"""Flat ``key=value`` configuration files and content hashing."""
from __future__ import annotations

import hashlib
from pathlib import Path


def parse_kv(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_kv(path) -> dict:
    return parse_kv(Path(path).read_text(encoding="utf-8"), str(path))


def format_kv(values: dict) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return ""
    return str(v)


def config_hash(values: dict) -> str:
    """First 32 hex digits of SHA-256 over the sorted ``key=value`` lines."""
    canonical = "".join(f"{k}={_fmt(values[k])}\n" for k in sorted(values) if k != "config_hash")
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:32]
