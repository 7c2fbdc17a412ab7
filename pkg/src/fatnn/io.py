"""Atomic file writes, CSV emission and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def fmt(x) -> str:
    """Shortest round-tripping text for a float; integers stay integers."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header is not None:
        w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, doc) -> Path:
    return atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def platform_note() -> str:
    return f"{platform.system()} {platform.machine()} python {platform.python_version()} numpy {np.__version__}"


def write_manifest(path, *, config_hash: str, version: str, started: str, finished: str,
                   files, status: str = "ok", error: str | None = None) -> Path:
    root = Path(path).parent
    entries = []
    for f in sorted(set(Path(f) for f in files)):
        if f.exists():
            rel = f.relative_to(root) if f.is_relative_to(root) else f
            entries.append({"path": str(rel), "sha256": sha256_file(f)})
    doc = {
        "config_sha256": config_hash,
        "tool_version": version,
        "platform": platform_note(),
        "started": started,
        "finished": finished,
        "status": status,
        "error": error,
        "files": entries,
    }
    return write_json(path, doc)
