"""Helpers shared by the line-oriented file formats.

All floats are written with %.17g, which round-trips float64 exactly, so every
format built on these helpers is bit-stable across save/load and across runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def fmt_vector(vec) -> str:
    return " ".join(fmt(x) for x in np.asarray(vec, dtype=np.float64))


def parse_floats(tokens) -> np.ndarray:
    if isinstance(tokens, str):
        tokens = tokens.split()
    return np.array([float(t) for t in tokens], dtype=np.float64)


def tensor_lines(name: str, arr: np.ndarray) -> list[str]:
    """Two lines per tensor: a 'tensor <name> <rows> <cols>' header, then the
    row-major values. 1-D arrays are stored as a single row."""
    mat = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    if mat.ndim != 2:
        raise ValueError(f"tensor {name!r} must be 1-D or 2-D, got shape {arr.shape}")
    header = f"tensor {name} {mat.shape[0]} {mat.shape[1]}"
    return [header, " ".join(fmt(x) for x in mat.ravel())]


def parse_tensor(header: str, data: str) -> tuple[str, np.ndarray]:
    parts = header.split()
    if len(parts) != 4 or parts[0] != "tensor":
        raise ValueError(f"malformed tensor header: {header!r}")
    name, rows, cols = parts[1], int(parts[2]), int(parts[3])
    values = parse_floats(data)
    if values.size != rows * cols:
        raise ValueError(
            f"tensor {name!r} declares {rows}x{cols} but carries {values.size} values"
        )
    return name, values.reshape(rows, cols)


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
