"""Headered CSV dumps that round-trip exactly."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_table(path: str | Path, header: Sequence[str], columns: Sequence) -> Path:
    """Write equal-length columns under ``header``; floats use repr for exact round trips."""
    cols = [np.asarray(c) for c in columns]
    if len(cols) != len(header) or len({len(c) for c in cols}) > 1:
        raise ValueError("need one equal-length column per header field")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([_cell(v) for v in row])
    return path


def read_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read a numeric headered CSV written by :func:`write_table`."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field in {row}") from None
    return header, np.array(rows, dtype=np.float64).reshape(len(rows), len(header))


def point_header(dim: int, prefix: str = "x") -> list[str]:
    return [f"{prefix}{i}" for i in range(dim)]


def write_points(path: str | Path, P, header: Sequence[str] | None = None, extra: dict | None = None) -> Path:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    header = list(header) if header is not None else point_header(P.shape[1])
    cols = [P[:, i] for i in range(P.shape[1])]
    for name, col in (extra or {}).items():
        header.append(name)
        cols.append(np.asarray(col))
    return write_table(path, header, cols)


def read_points(path: str | Path) -> np.ndarray:
    return read_table(path)[1]
