"""File emission: atomic writes, CSV fields and 16-bit PGM heatmaps."""

from __future__ import annotations

import io
import json
import os
from fractions import Fraction
from pathlib import Path

import numpy as np


def atomic_write(path, payload) -> Path:
    """Write via a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode() if isinstance(payload, str) else bytes(payload)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def field_csv(values) -> str:
    """``index,count_numerator,count_denominator,float`` rows, flat row-major index.

    Fractions keep their exact numerator and denominator; floats are written with
    denominator 1 and ``repr`` precision in the last column only.
    """
    out = io.StringIO()
    out.write("index,count_numerator,count_denominator,float\n")
    for idx, v in enumerate(np.asarray(values, dtype=object).ravel()):
        if isinstance(v, (Fraction, int, np.integer)):
            frac = Fraction(int(v)) if not isinstance(v, Fraction) else v
            out.write(f"{idx},{frac.numerator},{frac.denominator},{float(frac)!r}\n")
        else:
            out.write(f"{idx},,,{float(v)!r}\n")
    return out.getvalue()


def grid_csv(field) -> str:
    """``row,col,value`` rows for a rank-1 (col = 0) or rank-2 field."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim == 1:
        field = field[:, None]
    out = io.StringIO()
    out.write("row,col,value\n")
    for (r, c), v in np.ndenumerate(field):
        out.write(f"{r},{c},{float(v)!r}\n")
    return out.getvalue()


def pgm16(field) -> tuple:
    """Binary 16-bit PGM bytes (min maps to 0, max to 65535) and the sidecar text."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim == 1:
        field = field[None, :]
    if field.ndim != 2:
        raise ValueError(f"PGM export needs a rank-1 or rank-2 field, got shape {field.shape}")
    lo, hi = float(field.min()), float(field.max())
    span = hi - lo
    scaled = np.zeros(field.shape) if span == 0 else (field - lo) / span
    pixels = np.round(scaled * 65535).astype(">u2")
    h, w = field.shape
    header = f"P5\n{w} {h}\n65535\n".encode()
    sidecar = f"min {lo!r}\nmax {hi!r}\n"
    return header + pixels.tobytes(), sidecar


def write_pgm(path, field) -> tuple:
    """Write ``path`` and ``path + '.minmax.txt'``."""
    payload, sidecar = pgm16(field)
    path = Path(path)
    side = path.with_name(path.name + ".minmax.txt")
    atomic_write(path, payload)
    atomic_write(side, sidecar)
    return path, side


def read_pgm(path) -> np.ndarray:
    """Read back a file written by :func:`write_pgm` as raw 16-bit values."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.int64)
