"""CSV/JSON serialization with fixed numeric formatting.

Every float is written with 17 significant digits in scientific notation so
that reruns with the same configuration produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

FLOAT_FMT = "{:.16e}"


def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return FLOAT_FMT.format(x)


def write_csv(path, header, rows, meta: dict | None = None) -> Path:
    """Write a table; ``meta`` entries become ``# key=value`` lines on top."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path):
    """Return (meta, header, columns) where columns maps header name -> float array."""
    meta, header, data = {}, None, []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif header is None:
            header = [h.strip() for h in line.split(",")]
        else:
            data.append([float(v) for v in line.split(",")])
    if header is None:
        raise ValueError(f"{path}: no header line")
    arr = np.array(data, dtype=float).reshape(-1, len(header))
    return meta, header, {h: arr[:, i] for i, h in enumerate(header)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # JSON has no nan/inf; keep them as strings
        return x if math.isfinite(x) else fmt(x)
    return obj


def dumps(obj) -> str:
    """JSON text with floats in fixed 17-digit scientific notation."""
    def walk(v):
        if isinstance(v, dict):
            return "{" + ", ".join(f"{json.dumps(k)}: {walk(x)}" for k, x in sorted(v.items())) + "}"
        if isinstance(v, list):
            return "[" + ", ".join(walk(x) for x in v) + "]"
        if isinstance(v, float):
            return FLOAT_FMT.format(v)
        return json.dumps(v)
    return walk(_jsonable(obj))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj) + "\n")
    return path


def config_hash(config: dict) -> str:
    return hashlib.sha256(dumps(config).encode()).hexdigest()
