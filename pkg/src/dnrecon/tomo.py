"""Parallel-beam emission tomography core: geometry, system matrix, projectors.

Images are ``(n, n)`` arrays indexed ``[row, col]`` with row 0 at the top of the
field of view.  Sinograms are ``(views, bins)`` arrays.  Leading batch axes are
accepted by the projectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# Angles are reduced mod 2*pi and rounded to this many decimals before tracing,
# so geometries that differ only by whole turns trace identical rays.
_ANGLE_DECIMALS = 12
_SNAP = 1e-12


@dataclass(frozen=True)
class Geometry:
    """Equiangular parallel-beam acquisition over ``arc`` radians."""

    n: int
    views: int = 24
    bins: int | None = None
    arc: float = 2 * math.pi
    pixel_size: float = 1.0
    angle_offset: float = 0.0

    def __post_init__(self):
        if self.bins is None:
            object.__setattr__(self, "bins", self.n)
        for name in ("n", "views", "bins"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")

    @property
    def angles(self) -> np.ndarray:
        v = np.arange(self.views, dtype=np.float64)
        return self.angle_offset + v * self.arc / self.views

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.views, self.bins)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "views": self.views,
            "bins": self.bins,
            "arc": self.arc,
            "pixel_size": self.pixel_size,
            "angle_offset": self.angle_offset,
        }


def pixel_centers(n: int, pixel_size: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Physical (x, y) coordinates of pixel centers as two ``(n, n)`` grids."""
    c = (np.arange(n) - (n - 1) / 2.0) * pixel_size
    x = np.broadcast_to(c[None, :], (n, n))
    y = np.broadcast_to(-c[:, None], (n, n))
    return x, y


def _trig(theta: float) -> tuple[float, float]:
    theta = round(math.fmod(theta, 2 * math.pi) % (2 * math.pi), _ANGLE_DECIMALS)
    c, s = math.cos(theta), math.sin(theta)
    if abs(c) < _SNAP:
        c, s = 0.0, math.copysign(1.0, s)
    elif abs(s) < _SNAP:
        c, s = math.copysign(1.0, c), 0.0
    return c, s


def _trace_ray(t: float, c: float, s: float, n: int, p: float):
    """Siddon traversal of the line {x cos + y sin = t}; returns (pixel ids, lengths)."""
    h = n * p / 2.0
    ox, oy = t * c, t * s
    ex, ey = -s, c
    lo, hi = -math.inf, math.inf
    for o, e in ((ox, ex), (oy, ey)):
        if e == 0.0:
            if not (-h < o < h):
                return None
            continue
        a, b = (-h - o) / e, (h - o) / e
        lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
    if not hi > lo:
        return None

    planes = -h + p * np.arange(n + 1)
    params = [np.array([lo, hi])]
    for o, e in ((ox, ex), (oy, ey)):
        if e != 0.0:
            sv = (planes - o) / e
            params.append(sv[(sv > lo) & (sv < hi)])
    sv = np.unique(np.concatenate(params))
    lengths = np.diff(sv)
    mid = 0.5 * (sv[:-1] + sv[1:])
    keep = lengths > 1e-12 * p
    lengths, mid = lengths[keep], mid[keep]
    col = np.floor((ox + mid * ex + h) / p).astype(np.int64)
    row = np.floor((h - (oy + mid * ey)) / p).astype(np.int64)
    np.clip(col, 0, n - 1, out=col)
    np.clip(row, 0, n - 1, out=row)
    return row * n + col, lengths


@dataclass(frozen=True, eq=False)
class SystemMatrix:
    """Sparse ``(views*bins, n*n)`` matrix of ray/pixel intersection lengths."""

    geometry: Geometry
    matrix: sp.csr_matrix
    col_sums: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return self.matrix.indices[a:b], self.matrix.data[a:b]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    @classmethod
    def from_dense(cls, geom: Geometry, dense) -> SystemMatrix:
        """Wrap an explicit nonnegative matrix, e.g. a small analytic test system."""
        dense = np.asarray(dense, dtype=np.float64)
        expected = (geom.views * geom.bins, geom.n * geom.n)
        if dense.shape != expected:
            raise ValueError(f"matrix shape {dense.shape} does not match geometry {expected}")
        if np.any(dense < 0):
            raise ValueError("system matrix weights must be nonnegative")
        mat = sp.csr_matrix(dense)
        mat.eliminate_zeros()
        return cls(geom, mat, np.asarray(mat.sum(axis=0)).ravel())


def build_system_matrix(geom: Geometry) -> SystemMatrix:
    n, p = geom.n, geom.pixel_size
    offsets = (np.arange(geom.bins) - (geom.bins - 1) / 2.0) * p
    indptr = [0]
    indices, data = [], []
    for theta in geom.angles:
        c, s = _trig(float(theta))
        for t in offsets:
            traced = _trace_ray(float(t), c, s, n, p)
            if traced is not None:
                idx, w = traced
                order = np.argsort(idx, kind="stable")
                indices.append(idx[order])
                data.append(w[order])
                indptr.append(indptr[-1] + len(idx))
            else:
                indptr.append(indptr[-1])
    indices = np.concatenate(indices) if indices else np.zeros(0, np.int64)
    data = np.concatenate(data) if data else np.zeros(0)
    mat = sp.csr_matrix(
        (data, indices, np.asarray(indptr)),
        shape=(geom.views * geom.bins, n * n),
    )
    col_sums = np.bincount(indices, weights=data, minlength=n * n)
    return SystemMatrix(geom, mat, col_sums)


def _check_trailing(arr: np.ndarray, shape: tuple[int, int], what: str) -> None:
    if arr.shape[-2:] != shape:
        raise ValueError(f"{what} has shape {arr.shape[-2:]}, expected {shape}")


def forward_project(A: SystemMatrix, f: np.ndarray) -> np.ndarray:
    """Expected counts ``A @ f`` for an image or a batch of images."""
    f = np.asarray(f, dtype=np.float64)
    _check_trailing(f, A.geometry.image_shape, "image")
    lead = f.shape[:-2]
    flat = f.reshape(-1, A.shape[1])
    out = (A.matrix @ flat.T).T
    return out.reshape(lead + A.geometry.sinogram_shape)


def back_project(A: SystemMatrix, y: np.ndarray) -> np.ndarray:
    """Adjoint ``A.T @ y`` for a sinogram or a batch of sinograms."""
    y = np.asarray(y, dtype=np.float64)
    _check_trailing(y, A.geometry.sinogram_shape, "sinogram")
    lead = y.shape[:-2]
    flat = y.reshape(-1, A.shape[0])
    out = (A.matrix.T @ flat.T).T
    return out.reshape(lead + A.geometry.image_shape)


def sample_poisson(mean: np.ndarray, seed: int) -> np.ndarray:
    """Independent Poisson draws per bin from a Philox stream keyed on ``seed``."""
    mean = np.asarray(mean, dtype=np.float64)
    if np.any(mean < 0) or not np.all(np.isfinite(mean)):
        raise ValueError("Poisson means must be finite and nonnegative")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    return rng.poisson(mean).astype(np.float64)


def scale_to_counts(f: np.ndarray, A: SystemMatrix, total_counts: float) -> np.ndarray:
    """Rescale ``f`` so its noiseless projection sums to ``total_counts``."""
    if total_counts <= 0:
        raise ValueError("total_counts must be positive")
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("image must be nonnegative")
    # sum_i (A f)_i == <col_sums, f>
    current = float(np.dot(A.col_sums, f.ravel()))
    if current <= 0:
        raise ValueError("image has zero projection")
    return f * (total_counts / current)
