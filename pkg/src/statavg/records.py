"""Line-delimited JSON records with binary64 round-trippable numbers.

``json.dumps`` renders floats with ``repr``; the record format pins 17
significant digits instead, so this module carries a tiny encoder.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

FORMAT_VERSION = 1


class RecordError(ValueError):
    """Raised for malformed or unsupported records."""


def format_number(x: float) -> str:
    if not math.isfinite(x):
        raise RecordError(f"non-finite number {x!r} cannot be serialized")
    return format(float(x), ".17g")


def dumps(obj: Any) -> str:
    """Serialize ``obj`` to a single-line JSON string."""
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_number(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, dict):
        items = (f"{json.dumps(str(k))}: {dumps(v)}" for k, v in obj.items())
        return "{" + ", ".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    raise RecordError(f"cannot serialize object of type {type(obj).__name__}")


def loads(line: str) -> Any:
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordError(f"invalid JSON record: {exc}") from exc


def write_records(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(rec))
            fh.write("\n")


def read_records(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = loads(line)
            except RecordError as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from None
            if not isinstance(rec, dict):
                raise RecordError(f"{path}:{lineno}: record is not an object")
            if rec.get("version") != FORMAT_VERSION:
                raise RecordError(f"{path}:{lineno}: unsupported record version {rec.get('version')!r}")
            yield rec


def write_json(path: str | Path, obj: dict) -> None:
    """Write one record as a whole file (metadata, reports)."""
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> dict:
    return loads(Path(path).read_text(encoding="utf-8"))
