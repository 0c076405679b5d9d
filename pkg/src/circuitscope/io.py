"""Newline-delimited JSON artifacts with a versioned header line.

Floats are written with 17 significant digits so they round-trip exactly;
non-finite values become the strings "NaN", "Infinity" and "-Infinity",
which ``float()`` reads back. Keys keep insertion order, so identical inputs
give identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import os
from pathlib import Path
from typing import Any, Iterable

import numpy as np

FORMAT_VERSION = 1
TOOL_VERSION = "0.1.0"


class FormatError(ValueError):
    """Artifact header missing or written by an incompatible format version."""


def _float(v: float) -> str:
    if math.isnan(v):
        return '"NaN"'
    if math.isinf(v):
        return '"Infinity"' if v > 0 else '"-Infinity"'
    if v == 0.0:
        return "0.0" if math.copysign(1.0, v) > 0 else "-0.0"
    text = format(v, ".17g")
    if not any(ch in text for ch in ".en"):
        text += ".0"
    return text


def dumps(obj: Any) -> str:
    """Compact, deterministic JSON text for one record."""
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k), ensure_ascii=False)}:{dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if hasattr(obj, "value") and isinstance(obj.value, (str, int)):
        return dumps(obj.value)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def digest_of(obj: Any) -> str:
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()


def header(kind: str, config_digest: str, **extra) -> dict:
    return {"format_version": FORMAT_VERSION, "tool_version": TOOL_VERSION,
            "config_digest": config_digest, "kind": kind, **extra}


def write_ndjson(path: Path | str, head: dict, records: Iterable[dict]) -> None:
    """Write header and records, going through a temporary file so readers never see half a file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(head) + "\n")
        for rec in records:
            fh.write(dumps(rec) + "\n")
    os.replace(tmp, path)


def read_ndjson(path: Path | str, kind: str | None = None) -> tuple[dict, list[dict]]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty artifact")
    head = json.loads(lines[0])
    if not isinstance(head, dict) or "format_version" not in head:
        raise FormatError(f"{path}: missing header")
    if head["format_version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {head['format_version']}, expected {FORMAT_VERSION}")
    if kind is not None and head.get("kind") != kind:
        raise FormatError(f"{path}: artifact kind {head.get('kind')!r}, expected {kind!r}")
    return head, [json.loads(line) for line in lines[1:] if line]


def as_float(v) -> float:
    """Inverse of the non-finite encoding (and a plain cast otherwise)."""
    return float("nan") if v is None else float(v)


def write_csv(path: Path | str, columns: list[str], rows: Iterable[dict]) -> None:
    """Comma-separated table with the same number formatting as the NDJSON artifacts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        s = _float(float(v))
        return s.strip('"')
    if isinstance(v, (list, tuple)):
        return ";".join(_cell(x) for x in v)
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)
