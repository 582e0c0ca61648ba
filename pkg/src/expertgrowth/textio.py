"""Plain-text serialization helpers shared by the fitted models.

Everything written here is human-diffable: floats use ``repr`` so a
round trip is exact, matrices are row-major with a one-line header.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


def fmt(x: float) -> str:
    """Full-precision float formatting (shortest repr that round-trips)."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def matrix_to_text(name: str, arr: np.ndarray) -> str:
    a = np.atleast_2d(np.asarray(arr, dtype=float))
    lines = [f"# {name} {a.shape[0]} {a.shape[1]}"]
    lines.extend(" ".join(fmt(v) for v in row) for row in a)
    return "\n".join(lines) + "\n"


def parse_matrices(text: str) -> dict[str, np.ndarray]:
    """Inverse of a concatenation of :func:`matrix_to_text` blocks."""
    out: dict[str, np.ndarray] = {}
    lines = [ln for ln in text.splitlines() if ln.strip()]
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "#" or len(head) != 4:
            raise ValueError(f"malformed matrix header: {lines[i]!r}")
        name, rows, cols = head[1], int(head[2]), int(head[3])
        body = lines[i + 1 : i + 1 + rows]
        mat = np.array([[float(v) for v in ln.split()] for ln in body], dtype=float)
        out[name] = mat.reshape(rows, cols)
        i += 1 + rows
    return out


def kv_to_text(values: Mapping[str, object]) -> str:
    return "".join(f"{k} = {fmt(v) if not isinstance(v, str) else v}\n" for k, v in values.items())


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        key, _, val = ln.partition("=")
        out[key.strip()] = val.strip()
    return out


def write_csv(path: Path | str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path: Path | str) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def dump_json(obj: object) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()
