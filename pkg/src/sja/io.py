"""Small CSV helpers.  Floats are written with 17 significant digits and
every file ends lines with a bare newline."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence, Union

import numpy as np

__all__ = ["format_float", "write_columns", "read_columns"]


def format_float(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_columns(path: Union[str, Path], header: Sequence[str], columns: Sequence[Sequence],
                  comment: str = "") -> Path:
    """Write one CSV file; ``comment`` becomes a leading ``#`` line."""
    path = Path(path)
    cols = [np.asarray(c).ravel() for c in columns]
    if len({len(c) for c in cols}) > 1:
        raise ValueError("columns have different lengths")
    if len(header) != len(cols):
        raise ValueError("header and columns disagree in length")
    with path.open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in zip(*cols):
            writer.writerow([format_float(v) for v in row])
    return path


def read_columns(path: Union[str, Path]) -> dict:
    """Columns by name; numeric columns as float arrays, others as str arrays."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    header, body = rows[0], rows[1:]
    out = {}
    for i, name in enumerate(header):
        col = [r[i] for r in body]
        try:
            out[name] = np.array(col, dtype=float)
        except ValueError:
            out[name] = np.array(col, dtype=str)
    return out
