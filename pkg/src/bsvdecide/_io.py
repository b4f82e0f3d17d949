"""Plain-text persistence helpers: CSV tables and JSON manifests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.17g"


def write_table(path, header: list[str], rows: np.ndarray, fmt=FLOAT_FMT) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.asarray(rows)
    if rows.ndim == 1:
        rows = rows[:, None]
    np.savetxt(path, rows, delimiter=",", header=",".join(header), comments="", fmt=fmt)
    return path


def read_table(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def indexed_rows(arr: np.ndarray) -> np.ndarray:
    """Flatten ``arr`` of shape (a, b, ...rest) to rows ``[i, j, *rest.ravel()]``."""
    a, b = arr.shape[:2]
    ii, jj = np.meshgrid(np.arange(a), np.arange(b), indexing="ij")
    return np.column_stack([ii.ravel(), jj.ravel(), arr.reshape(a * b, -1)])


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())
