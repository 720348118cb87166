"""Deterministic CSV / JSON writers with a versioned metadata header."""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

from .config import SCHEMA_VERSION


def fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float) or hasattr(x, "dtype"):
        v = float(x)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(x)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def header_lines(command: str, digest: str, extra: dict | None = None) -> list[str]:
    lines = [f"# schema: ctqubits/{command}/{SCHEMA_VERSION}", f"# config_sha256: {digest}"]
    for k, v in (extra or {}).items():
        lines.append(f"# {k}: {fmt(v)}")
    return lines


def write_csv(path: Path, command: str, digest: str, columns: Sequence[str], rows: Iterable[Sequence],
              meta: dict | None = None, footer: Sequence[str] = ()) -> Path:
    lines = header_lines(command, digest, meta)
    lines.append(",".join(columns))
    for r in rows:
        lines.append(",".join(fmt(x) for x in r))
    lines.extend(f"# {f}" for f in footer)
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "dtype"):
        return _clean(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path: Path, command: str, digest: str, payload: dict) -> Path:
    doc = {"schema": f"ctqubits/{command}/{SCHEMA_VERSION}", "config_sha256": digest, **_clean(payload)}
    _atomic_write(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path


def table_json(columns: Sequence[str], rows: Iterable[Sequence], **extra) -> dict:
    return {"columns": list(columns), "rows": [list(r) for r in rows], **extra}
