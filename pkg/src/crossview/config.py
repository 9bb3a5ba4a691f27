"""Flat ``key = value`` text serialization for (nested) dataclass configs.

Values are JSON literals, nested dataclasses use dotted keys, ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any


def to_items(obj, prefix: str = "") -> list[tuple[str, Any]]:
    items = []
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            items.extend(to_items(val, f"{prefix}{f.name}."))
        else:
            if isinstance(val, (set, frozenset)):
                val = sorted(val)
            elif isinstance(val, tuple):
                val = list(val)
            items.append((prefix + f.name, val))
    return items


def dumps(obj) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in to_items(obj))


def parse(text: str) -> dict[str, Any]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def apply(obj, values: dict[str, Any]):
    """Return a copy of dataclass ``obj`` with dotted-key overrides applied."""
    nested: dict[str, dict] = {}
    direct = {}
    names = {f.name: f for f in dataclasses.fields(obj)}
    for k, v in values.items():
        head, _, rest = k.partition(".")
        if head not in names:
            raise KeyError(f"unknown config key {k!r} for {type(obj).__name__}")
        if rest:
            nested.setdefault(head, {})[rest] = v
        else:
            cur = getattr(obj, head)
            if isinstance(cur, tuple) and isinstance(v, list):
                v = tuple(v)
            elif isinstance(cur, float) and isinstance(v, int):
                v = float(v)
            direct[head] = v
    for head, sub in nested.items():
        direct[head] = apply(getattr(obj, head), sub)
    return dataclasses.replace(obj, **direct)


def load(obj, path) -> Any:
    return apply(obj, parse(Path(path).read_text()))


def save(obj, path) -> None:
    Path(path).write_text(dumps(obj))
