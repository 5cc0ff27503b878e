"""Flat key-value configs and seeded random streams."""

from __future__ import annotations

import json
import os
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for the named sub-stream of a root seed.

    ``rng_stream(7, "augment", 3)`` and ``rng_stream(7, "init")`` never share
    state, so one component can change its draws without shifting another's.
    """
    keys = [int(seed)]
    for name in names:
        keys.append(name if isinstance(name, int) else zlib.crc32(str(name).encode()))
    return np.random.default_rng(np.random.SeedSequence(keys))


def parse_value(text: str) -> Any:
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text[:1] in "[{\"":
        return json.loads(text)
    return text


def load_config(path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    config = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        config[key.strip().replace("-", "_")] = parse_value(value)
    return config


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple, dict)):
        return json.dumps(value)
    return str(value)


def dump_config(config: Mapping[str, Any], path) -> None:
    lines = [f"{key} = {format_value(config[key])}" for key in sorted(config)]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve(defaults: Mapping[str, Any], file_config: Mapping[str, Any] | None, overrides: Mapping[str, Any]) -> dict:
    """defaults < config file < explicit CLI flags (``None`` flags are ignored)."""
    resolved = dict(defaults)
    resolved.update(file_config or {})
    resolved.update({k: v for k, v in overrides.items() if v is not None})
    return resolved


def apply_thread_limit() -> None:
    """Cap BLAS threads at ``MVC_THREADS`` when set."""
    limit = os.environ.get("MVC_THREADS")
    if not limit:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(int(limit))
