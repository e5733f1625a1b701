"""JSON output with every float written as a 17-significant-digit decimal."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


def _encode(obj, indent: int, level: int) -> str:
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    sep = "," + pad if indent else ", "
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"non-finite float {x} is not JSON-serializable")
        s = f"{x:.17g}"
        return s if any(c in s for c in ".eE") else s + ".0"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist(), indent, level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{" + pad + sep.join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + ", ".join(_encode(v, 0, level + 1) for v in obj) + "]" if not indent or _flat(obj) else (
            "[" + pad + sep.join(_encode(v, indent, level + 1) for v in obj) + end + "]"
        )
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _flat(seq) -> bool:
    return all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq)


def dumps(obj, indent: int = 2) -> str:
    return _encode(obj, indent, 0)


def dump(obj, path: str | Path, indent: int = 2) -> None:
    Path(path).write_text(dumps(obj, indent) + "\n")


def load(path: str | Path):
    return json.loads(Path(path).read_text())
