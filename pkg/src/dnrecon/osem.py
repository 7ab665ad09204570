"""Ordered-subset EM reconstruction and Butterworth post-filtering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .tomo import SystemMatrix


@dataclass(frozen=True)
class OsemConfig:
    iterations: int = 8
    subsets: int = 4
    init_value: float = 1.0
    eps: float = 1e-12

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.subsets < 1:
            raise ValueError("subsets must be >= 1")
        if not self.init_value > 0:
            raise ValueError("init_value must be positive")


@dataclass(frozen=True)
class ButterworthConfig:
    cutoff: float = 0.15
    order: int = 3

    def __post_init__(self):
        if not 0 < self.cutoff <= 0.5:
            raise ValueError(f"cutoff must lie in (0, 0.5] cycles/pixel, got {self.cutoff}")
        if self.order < 1:
            raise ValueError("order must be >= 1")


def subset_views(views: int, subsets: int) -> list[np.ndarray]:
    """View indices of each subset, assigned by stride (v mod S)."""
    return [np.arange(s, views, subsets) for s in range(subsets)]


def _subset_operators(A: SystemMatrix, subsets: int):
    V, D = A.geometry.sinogram_shape
    ops = []
    for views in subset_views(V, subsets):
        rows = (views[:, None] * D + np.arange(D)[None, :]).ravel()
        sub = A.matrix[rows]
        sens = np.asarray(sub.sum(axis=0)).ravel()
        ops.append((rows, sp.csr_matrix(sub), sens))
    return ops


def osem_reconstruct(y, A: SystemMatrix, cfg: OsemConfig = OsemConfig(),
                     init: np.ndarray | None = None, callback=None) -> np.ndarray:
    """Run ``cfg.iterations`` passes of subset EM updates.

    ``init`` overrides the uniform start.  ``callback(iteration, image)`` is
    invoked after every full pass over the subsets.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != A.geometry.sinogram_shape:
        raise ValueError(f"sinogram shape {y.shape} does not match geometry "
                         f"{A.geometry.sinogram_shape}")
    if np.any(y < 0):
        raise ValueError("sinogram counts must be nonnegative")
    if init is None:
        f = np.full(A.shape[1], float(cfg.init_value))
    else:
        f = np.array(init, dtype=np.float64).ravel()
        if f.size != A.shape[1] or np.any(f < 0):
            raise ValueError("init must be a nonnegative image of the geometry's size")
    yflat = y.ravel()
    ops = _subset_operators(A, cfg.subsets)
    for it in range(cfg.iterations):
        for rows, sub, sens in ops:
            ybar = sub @ f
            ratio = yflat[rows] / np.maximum(ybar, cfg.eps)
            back = sub.T @ ratio
            seen = sens > 0
            f[seen] *= back[seen] / sens[seen]
        if callback is not None:
            callback(it, f.reshape(A.geometry.image_shape).copy())
    return f.reshape(A.geometry.image_shape)


def butterworth_gain(shape: tuple[int, int], cfg: ButterworthConfig) -> np.ndarray:
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    rho = np.hypot(fx, fy)
    return 1.0 / (1.0 + (rho / cfg.cutoff) ** (2 * cfg.order))


def butterworth_filter(f, cfg: ButterworthConfig = ButterworthConfig()) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if min(f.shape[-2:]) < 2:
        raise ValueError("image must be at least 2x2")
    gain = butterworth_gain(f.shape[-2:], cfg)
    return np.fft.ifft2(np.fft.fft2(f) * gain).real
