"""Image quality scores: Gaussian-window SSIM and ROI contrast-to-noise ratio."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .phantom import PhantomSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float | None = None  # None: max - min of the reference image


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _local_mean(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, w, axis=0, mode="reflect")
    return ndimage.correlate1d(out, w, axis=1, mode="reflect")


def ssim_map(f_r, f_0, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    f_r = np.asarray(f_r, dtype=np.float64)
    f_0 = np.asarray(f_0, dtype=np.float64)
    if f_r.shape != f_0.shape:
        raise ValueError(f"shape mismatch: {f_r.shape} vs {f_0.shape}")
    L = float(f_0.max() - f_0.min()) if cfg.data_range is None else float(cfg.data_range)
    if not L > 0:
        raise ValueError("reference image has zero dynamic range")
    c1, c2 = (cfg.k1 * L) ** 2, (cfg.k2 * L) ** 2
    w = gaussian_window(cfg.window, cfg.sigma)
    mu_r, mu_0 = _local_mean(f_r, w), _local_mean(f_0, w)
    var_r = _local_mean(f_r * f_r, w) - mu_r**2
    var_0 = _local_mean(f_0 * f_0, w) - mu_0**2
    cov = _local_mean(f_r * f_0, w) - mu_r * mu_0
    num = (2 * mu_r * mu_0 + c1) * (2 * cov + c2)
    den = (mu_r**2 + mu_0**2 + c1) * (var_r + var_0 + c2)
    return num / den


def ssim(f_r, f_0, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean local SSIM of ``f_r`` against the reference ``f_0``."""
    return float(ssim_map(f_r, f_0, cfg).mean())


def cnr(f, roi_mask, background_mask) -> float:
    f = np.asarray(f, dtype=np.float64)
    roi = f[np.asarray(roi_mask, dtype=bool)]
    bg = f[np.asarray(background_mask, dtype=bool)]
    if roi.size == 0:
        raise ValueError("ROI mask is empty")
    if bg.size < 2:
        raise ValueError("background mask needs at least two pixels")
    sigma = bg.std()
    if sigma == 0:
        raise ValueError("background standard deviation is zero")
    return float(abs(roi.mean() - bg.mean()) / sigma)


@dataclass
class RoiReport:
    background_mean: float
    background_std: float
    rois: list[tuple[str, float, float]]  # (name, roi mean, cnr)

    @property
    def mean_cnr(self) -> float:
        return float(np.mean([c for _, _, c in self.rois]))


def roi_report(f, spec: PhantomSpec) -> RoiReport:
    f = np.asarray(f, dtype=np.float64)
    bg_mask = spec.background_mask()
    masks = {k: m for k, m in spec.roi_masks().items() if m.any()}
    if not masks:
        raise ValueError(f"phantom {spec.name!r} has no nonempty ROI masks")
    bg = f[bg_mask]
    rows = [(name, float(f[m].mean()), cnr(f, m, bg_mask)) for name, m in masks.items()]
    return RoiReport(float(bg.mean()), float(bg.std()), rows)


def score_table(recons: dict[str, np.ndarray], truth, spec: PhantomSpec,
                cfg: SsimConfig = SsimConfig()) -> list[dict]:
    """One row per method: SSIM against ``truth`` and the mean CNR over ``spec``'s ROIs."""
    truth = np.asarray(truth, dtype=np.float64)
    rows = []
    for name, img in recons.items():
        img = np.asarray(img, dtype=np.float64)
        if img.shape != truth.shape:
            raise ValueError(f"{name}: shape {img.shape} does not match truth {truth.shape}")
        rows.append({"method": name, "ssim": ssim(img, truth, cfg),
                     "cnr": roi_report(img, spec).mean_cnr})
    return rows


def format_table(rows: list[dict], phantom: str = "") -> str:
    width = max([len("Method")] + [len(r["method"]) for r in rows])
    pw = max(len("Phantom"), len(phantom))
    lines = [f"{'Phantom':<{pw}} {'Method':<{width}} {'SSIM':>6} {'CNR':>6}"]
    for i, r in enumerate(rows):
        label = phantom if i == 0 else ""
        lines.append(f"{label:<{pw}} {r['method']:<{width}} {r['ssim']:>6.2f} {r['cnr']:>6.1f}")
    return "\n".join(lines)


def write_table_csv(path, rows: list[dict], phantom: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phantom", "method", "ssim", "cnr"])
        for r in rows:
            w.writerow([phantom, r["method"], repr(r["ssim"]), repr(r["cnr"])])
