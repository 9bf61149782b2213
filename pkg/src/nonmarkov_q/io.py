"""Atomic file output, CSV helpers and content hashing."""

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def format_float(v):
    """Shortest round-tripping repr; independent of the process locale."""
    return repr(float(v))


def atomic_write_text(path, text):
    """Write ``text`` to a temporary sibling then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj):
    return atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_csv(path, header, rows):
    """Rows are sequences of ints/floats; floats use :func:`format_float`."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            str(v) if isinstance(v, (int, np.integer)) else format_float(v) for v in row
        ))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_csv(path):
    """Return ``(header, float array)``; an empty body gives shape ``(0, ncols)``."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    body = [[float(v) for v in line.split(",")] for line in lines[1:] if line]
    arr = np.array(body, dtype=float).reshape(len(body), len(header))
    return header, arr


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def cell_names(n_agent, n_act, prefix="q"):
    return [f"{prefix}_{s}_{u}" for s in range(n_agent) for u in range(n_act)]
