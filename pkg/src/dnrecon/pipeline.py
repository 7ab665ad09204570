"""Evaluation helpers: simulate the fixed phantoms and score DNR-Net against OSEM."""

from __future__ import annotations

import numpy as np

from .dnrnet import DnrNetModel, reconstruct
from .metrics import SsimConfig, score_table
from .osem import ButterworthConfig, OsemConfig, butterworth_filter, osem_reconstruct
from .phantom import PhantomSpec, preset_phantom, render_phantom
from .tomo import SystemMatrix, forward_project, sample_poisson, scale_to_counts

EVAL_PHANTOMS = ("A", "B", "shepp_logan")
CUTOFFS = (0.3, 0.15)


def simulate_phantom(spec: PhantomSpec, A: SystemMatrix, total_counts: float,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Count-scaled ground truth and a Poisson sinogram for one phantom."""
    truth = scale_to_counts(render_phantom(spec), A, total_counts)
    return truth, sample_poisson(forward_project(A, truth), seed)


def method_images(y, A: SystemMatrix, model: DnrNetModel | None = None,
                  osem: OsemConfig = OsemConfig(), cutoffs=CUTOFFS) -> dict[str, np.ndarray]:
    """Reconstructions keyed by method: DNR-Net (if a model is given), OSEM, filtered OSEM."""
    out = {}
    if model is not None:
        out["DNR-Net"] = reconstruct(model, y).astype(np.float64)
    base = osem_reconstruct(y, A, osem)
    out["OSEM"] = base
    for fc in cutoffs:
        out[f"OSEM fc={fc}"] = butterworth_filter(base, ButterworthConfig(cutoff=fc))
    return out


def compare(A: SystemMatrix, total_counts: float, seed: int, model: DnrNetModel | None = None,
            phantoms=EVAL_PHANTOMS, osem: OsemConfig = OsemConfig(), cutoffs=CUTOFFS,
            ssim_cfg: SsimConfig = SsimConfig()) -> dict[str, list[dict]]:
    """Score table per evaluation phantom; each phantom gets its own noise seed."""
    tables = {}
    for k, name in enumerate(phantoms):
        spec = preset_phantom(name, A.geometry.n)
        truth, y = simulate_phantom(spec, A, total_counts, seed + k)
        tables[name] = score_table(method_images(y, A, model, osem, cutoffs), truth, spec,
                                   ssim_cfg)
    return tables
