"""CSV interchange with unit-bearing headers.

Floats are written with 17 significant digits so a value survives a write
and read unchanged, and identical arrays always produce identical bytes.
"""

import csv
import hashlib
from pathlib import Path

import numpy as np

from .errors import DataFileError


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def write_csv(path, columns):
    """Write equal-length columns (``{header: array}``) to ``path``."""
    names = list(columns)
    arrays = [np.asarray(columns[k]) for k in names]
    n = {len(a) for a in arrays}
    if len(n) > 1:
        raise DataFileError(f"columns have unequal lengths {sorted(n)}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(names) + "\n")
            for row in zip(*arrays):
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise DataFileError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path, required=()):
    """Read a headed numeric CSV into ``{header: float array}``."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataFileError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataFileError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    missing = [k for k in required if k not in header]
    if missing:
        raise DataFileError(f"{path} lacks column(s) {', '.join(missing)}")
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataFileError(f"{path}: non-numeric entry ({exc})") from exc
    data = data.reshape(-1, len(header))
    return {h: data[:, k] for k, h in enumerate(header)}


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
