"""Plain-text array files and PGM previews.

CSV layout: the first line holds the dimensions (``n`` for an image,
``views,bins`` for a sinogram); each following line is one row of the array,
values written with 17 significant digits so they read back bit-exactly.
"""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def _write(path, arr: np.ndarray, header: str) -> None:
    buf = io.StringIO()
    buf.write(header + "\n")
    np.savetxt(buf, arr, fmt="%.17g", delimiter=",")
    Path(path).write_text(buf.getvalue())


def write_image_csv(path, f: np.ndarray) -> None:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != f.shape[1]:
        raise ValueError(f"image must be square 2-D, got shape {f.shape}")
    _write(path, f, f"{f.shape[0]}")


def write_sinogram_csv(path, y: np.ndarray) -> None:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError(f"sinogram must be 2-D, got shape {y.shape}")
    _write(path, y, f"{y.shape[0]},{y.shape[1]}")


def read_csv(path) -> np.ndarray:
    text = Path(path).read_text()
    header, _, body = text.partition("\n")
    try:
        dims = [int(v) for v in header.strip().split(",")]
    except ValueError:
        raise FormatError(f"{path}: bad header {header!r}") from None
    if len(dims) == 1:
        shape = (dims[0], dims[0])
    elif len(dims) == 2:
        shape = tuple(dims)
    else:
        raise FormatError(f"{path}: header must be 'n' or 'views,bins'")
    try:
        data = np.loadtxt(io.StringIO(body), delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if data.shape != shape:
        raise FormatError(f"{path}: header says {shape}, found {data.shape}")
    return data


def is_sinogram_file(path) -> bool:
    with open(path) as fh:
        return "," in fh.readline()


def write_pgm(path, arr: np.ndarray) -> None:
    """8-bit binary PGM after min-max scaling."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte separates maxval from the pixel data
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    pixels = np.frombuffer(raw[m.end():m.end() + w * h], dtype=np.uint8)
    if pixels.size != w * h or maxval != 255:
        raise FormatError(f"{path}: truncated or unsupported PGM")
    return pixels.reshape(h, w)
