"""Plain-text ``key = value`` files used for scene specs, configs and metadata.

Blank lines and ``#`` comments are ignored. A key may repeat (``surface`` lines
in a scene spec do), so :func:`parse_kv` returns ordered ``(key, value)`` pairs.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable


class KVError(ValueError):
    pass


def parse_kv(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise KVError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise KVError(f"line {lineno}: empty key")
        pairs.append((key, value.strip()))
    return pairs


def read_kv(path: str | Path) -> list[tuple[str, str]]:
    return parse_kv(Path(path).read_text())


def to_dict(pairs: Iterable[tuple[str, str]]) -> dict[str, str]:
    out: dict[str, str] = {}
    for key, value in pairs:
        if key in out:
            raise KVError(f"duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(items: Iterable[tuple[str, object]]) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in items)


def _fmt(value: object) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(_fmt(v) for v in value)
    return str(value)


def floats(value: str, n: int | None = None) -> list[float]:
    try:
        out = [float(tok) for tok in value.split()]
    except ValueError as exc:
        raise KVError(f"not a list of numbers: {value!r}") from exc
    if n is not None and len(out) != n:
        raise KVError(f"expected {n} numbers, got {len(out)} in {value!r}")
    return out


def ints(value: str, n: int | None = None) -> list[int]:
    try:
        out = [int(tok) for tok in value.split()]
    except ValueError as exc:
        raise KVError(f"not a list of integers: {value!r}") from exc
    if n is not None and len(out) != n:
        raise KVError(f"expected {n} integers, got {len(out)} in {value!r}")
    return out
