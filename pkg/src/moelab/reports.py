"""CSV tables and 8-bit PGM heatmaps.  Numbers are written with six decimals."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError


def fmt(x: float) -> str:
    return f"{float(x):.6f}"


def _write(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_matrix_csv(path, labels: Sequence[str], matrix: np.ndarray) -> None:
    _write(path, ["language", *labels], ([l, *map(fmt, row)] for l, row in zip(labels, matrix)))


def write_curves_csv(path, curves) -> None:
    """One column per (language, reference) curve, one row per layer."""
    curves = list(curves)
    if not curves:
        raise InputError("no curves to write")
    n_layers = len(curves[0].values)
    header = ["layer", *(f"{c.language}~{c.reference}" for c in curves)]
    _write(path, header, ([l, *(fmt(c.values[l]) for c in curves)] for l in range(n_layers)))


def read_curves_csv(path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {name: [float(r[j]) for r in body] for j, name in enumerate(header) if j > 0}


def write_regions_csv(path, regions: dict) -> None:
    """Shallow / Middle / Deep averages per language, plus their mean."""
    rows = []
    for label, (s, m, d) in regions.items():
        rows.append([label, fmt(s), fmt(m), fmt(d), fmt((s + m + d) / 3.0)])
    _write(path, ["language", "Shallow", "Middle", "Deep", "Avg"], rows)


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def to_gray(values: np.ndarray) -> np.ndarray:
    """Similarities in [0, 1] to 8-bit gray levels, one level per 1/255."""
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise InputError("heatmap values must lie in [0, 1]")
    return np.rint(values * 255.0).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    gray = to_gray(values)
    if gray.ndim != 2:
        raise InputError("heatmap must be 2-D")
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
