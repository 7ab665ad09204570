"""Poisson negative log-likelihood of a sinogram given an image, and its derivatives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .tomo import SystemMatrix, back_project, forward_project


@dataclass(frozen=True)
class ObjectiveConfig:
    eps_y: float = 1e-12
    include_constant: bool = True

    def __post_init__(self):
        if not self.eps_y > 0:
            raise ValueError("eps_y must be positive")


DEFAULT = ObjectiveConfig()


def _check_counts(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0):
        raise ValueError("sinogram counts must be nonnegative")
    return y


def expected_counts(f: np.ndarray, A: SystemMatrix) -> np.ndarray:
    """Forward projection of the image clamped at zero."""
    return forward_project(A, np.maximum(np.asarray(f, dtype=np.float64), 0.0))


def neg_loglik(f, y, A: SystemMatrix, cfg: ObjectiveConfig = DEFAULT):
    """Sum over bins of ``ybar - y ln ybar + ln y!``; one value per image in a batch."""
    y = _check_counts(y)
    ybar = expected_counts(f, A)
    terms = ybar - y * np.log(np.maximum(ybar, cfg.eps_y))
    if cfg.include_constant:
        terms = terms + gammaln(y + 1.0)
    out = terms.sum(axis=(-2, -1))
    return float(out) if out.ndim == 0 else out


def grad_neg_loglik(f, y, A: SystemMatrix, cfg: ObjectiveConfig = DEFAULT) -> np.ndarray:
    """``col_sums - A^T (y / ybar)`` with ``ybar`` guarded below by ``eps_y``."""
    y = _check_counts(y)
    ybar = expected_counts(f, A)
    ratio = y / np.maximum(ybar, cfg.eps_y)
    return A.col_sums.reshape(A.geometry.image_shape) - back_project(A, ratio)


def grad_neg_loglik_vjp(f, y, A: SystemMatrix, v, cfg: ObjectiveConfig = DEFAULT) -> np.ndarray:
    """Transpose-Jacobian of ``grad_neg_loglik`` with respect to ``f``, applied to ``v``.

    The Jacobian is ``A^T diag(y / ybar^2) A`` restricted to pixels with f > 0
    (the clamp) and to bins where ``ybar`` exceeds the guard; it is symmetric
    apart from the clamp mask, which lands on the output side here.
    """
    y = _check_counts(y)
    f = np.asarray(f, dtype=np.float64)
    ybar = forward_project(A, np.maximum(f, 0.0))
    live = ybar > cfg.eps_y
    w = np.where(live, y / np.where(live, ybar, 1.0) ** 2, 0.0)
    return back_project(A, w * forward_project(A, v)) * (f > 0)
