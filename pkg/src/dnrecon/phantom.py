"""Activity phantoms built from ellipsoidal sources.

Soft-edged ("fermi") sources follow a Fermi-function radial profile around an
ellipse; hard-edged ("flat") sources are plain indicator ellipses, used for the
Shepp-Logan table.  Source coordinates are physical pixel units with the origin
at the image center and y pointing up.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .tomo import pixel_centers

log = logging.getLogger(__name__)

PRESETS = {"A": "phantom_a.json", "B": "phantom_b.json", "shepp_logan": "shepp_logan.json"}
BACKGROUND_MARGIN = 2


@dataclass(frozen=True)
class SourceSpec:
    amplitude: float
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    phi: float = 0.0
    diffusion: float = 0.05
    profile: str = "fermi"
    roi: bool = True
    name: str = ""

    def __post_init__(self):
        u, v = self.semi_axes
        if u <= 0 or v <= 0:
            raise ValueError(f"semi-axes must be positive, got {self.semi_axes}")
        if self.profile == "fermi" and self.diffusion <= 0:
            raise ValueError(f"diffusion must be positive, got {self.diffusion}")
        if self.profile not in ("fermi", "flat"):
            raise ValueError(f"unknown profile {self.profile!r}")


@dataclass(frozen=True)
class PhantomSpec:
    n: int
    background: float = 0.0
    sources: tuple[SourceSpec, ...] = ()
    name: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.background < 0:
            raise ValueError("background must be nonnegative")
        object.__setattr__(self, "sources", tuple(self.sources))

    @property
    def roi_sources(self) -> list[SourceSpec]:
        return [s for s in self.sources if s.roi]

    def roi_masks(self) -> dict[str, np.ndarray]:
        masks = {}
        for k, src in enumerate(self.sources):
            if src.roi:
                masks[src.name or f"source{k}"] = source_interior(src, self.n)
        return masks

    def background_mask(self, margin: int = BACKGROUND_MARGIN) -> np.ndarray:
        """Pixels at least ``margin`` pixels away from every ROI, inside the FOV.

        Non-ROI (support) sources, such as the skull and brain of Shepp-Logan,
        must contain the background; their interiors are eroded by ``margin``.
        """
        n = self.n
        x, y = pixel_centers(n)
        bg = np.hypot(x, y) < n / 2.0 - margin
        yy, xx = np.mgrid[-margin : margin + 1, -margin : margin + 1]
        disk = xx**2 + yy**2 <= margin**2
        hot = np.zeros((n, n), dtype=bool)
        for src in self.sources:
            inside = source_interior(src, n)
            if src.roi:
                hot |= inside
            else:
                bg &= ndimage.binary_erosion(inside, structure=disk)
        if hot.any():
            bg &= ~ndimage.binary_dilation(hot, structure=disk)
        return bg

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "background": self.background,
            "sources": [asdict(s) for s in self.sources],
        }

    @classmethod
    def from_dict(cls, d: dict) -> PhantomSpec:
        sources = []
        for s in d.get("sources", []):
            s = dict(s)
            s["center"] = tuple(s["center"])
            s["semi_axes"] = tuple(s["semi_axes"])
            sources.append(SourceSpec(**s))
        return cls(n=int(d["n"]), background=float(d.get("background", 0.0)),
                   sources=tuple(sources), name=d.get("name", ""))


def save_spec(spec: PhantomSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def load_spec(path) -> PhantomSpec:
    return PhantomSpec.from_dict(json.loads(Path(path).read_text()))


def geometric_radius(src: SourceSpec, theta) -> np.ndarray | float:
    """Boundary radius of the source ellipse in direction ``theta``."""
    u, v = src.semi_axes
    if u <= 0 or v <= 0:
        raise ValueError("semi-axes must be positive")
    delta = np.asarray(theta) - src.phi
    out = u * v / np.sqrt(u**2 * np.cos(delta) ** 2 + v**2 * np.sin(delta) ** 2)
    return float(out) if np.ndim(out) == 0 else out


def _polar(src: SourceSpec, n: int) -> tuple[np.ndarray, np.ndarray]:
    x, y = pixel_centers(n)
    dx, dy = x - src.center[0], y - src.center[1]
    return np.hypot(dx, dy), np.arctan2(dy, dx)


def source_interior(src: SourceSpec, n: int) -> np.ndarray:
    r, theta = _polar(src, n)
    return r < geometric_radius(src, theta)


def source_profile(src: SourceSpec, n: int) -> np.ndarray:
    """Unit-amplitude footprint of one source on the ``n x n`` grid."""
    r, theta = _polar(src, n)
    big_r = geometric_radius(src, theta)
    if src.profile == "flat":
        return (r < big_r).astype(np.float64)
    # 1 / (exp(z) + 1) == expit(-z)
    return expit(-(r - big_r) / (src.diffusion * big_r))


def render_phantom(spec: PhantomSpec) -> np.ndarray:
    img = np.full((spec.n, spec.n), float(spec.background))
    for src in spec.sources:
        img += src.amplitude * source_profile(src, spec.n)
    clamped = int(np.count_nonzero(img < 0))
    if clamped:
        log.debug("phantom %r: clamped %d negative pixels", spec.name, clamped)
        np.maximum(img, 0.0, out=img)
    return img


@dataclass(frozen=True)
class RandomizationLimits:
    """Closed intervals for random phantom parameters.

    ``center_range`` is a fraction of the half-width applied to both
    coordinates, and centers are redrawn until they lie within
    ``center_radius`` half-widths of the origin; ``axes_range`` is a fraction
    of the image side ``n``.
    """

    k_range: tuple[int, int] = (1, 5)
    background_range: tuple[float, float] = (0.05, 0.3)
    amplitude_range: tuple[float, float] = (-0.5, 1.0)
    center_range: tuple[float, float] = (-0.8, 0.8)
    axes_range: tuple[float, float] = (0.05, 0.25)
    phi_range: tuple[float, float] = (0.0, math.pi)
    diffusion_range: tuple[float, float] = (0.02, 0.15)
    center_radius: float = 0.8

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "center_radius":
                continue
            lo, hi = value
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.k_range[0] < 0:
            raise ValueError("k_range must be nonnegative")
        if self.axes_range[0] <= 0 or self.diffusion_range[0] <= 0:
            raise ValueError("axes and diffusion must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> RandomizationLimits:
        return cls(**{k: v if k == "center_radius" else tuple(v) for k, v in d.items()})


def sample_random_phantom(limits: RandomizationLimits, seed: int, n: int = 64,
                          max_redraws: int = 1000) -> PhantomSpec:
    rng = np.random.default_rng(seed)
    h = n / 2.0

    def uniform(interval):
        lo, hi = interval
        return float(lo) if lo == hi else float(rng.uniform(lo, hi))

    k = int(rng.integers(limits.k_range[0], limits.k_range[1] + 1))
    background = uniform(limits.background_range)
    c_radius = limits.center_radius * h
    sources = []
    for i in range(k):
        amp = uniform(limits.amplitude_range)
        u = uniform(limits.axes_range) * n
        v = uniform(limits.axes_range) * n
        phi = uniform(limits.phi_range)
        d = uniform(limits.diffusion_range)
        for _ in range(max_redraws):
            cx, cy = uniform(limits.center_range) * h, uniform(limits.center_range) * h
            dist = math.hypot(cx, cy)
            if dist <= c_radius + 1e-12 and dist + max(u, v) <= h:
                break
        else:
            raise RuntimeError(f"could not fit source {i} inside the field of view "
                               f"after {max_redraws} draws")
        sources.append(SourceSpec(amp, (cx, cy), (u, v), phi, d, name=f"source{i}"))
    return PhantomSpec(n=n, background=background, sources=tuple(sources),
                       name=f"random-{seed}")


def preset_phantom(name: str, n: int = 128) -> PhantomSpec:
    """Load a fixed evaluation phantom, scaled to an ``n x n`` grid.

    Table geometry is stored in half-width units; amplitudes are absolute.
    """
    try:
        fname = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    table = json.loads((resources.files("dnrecon") / "data" / fname).read_text())
    h = n / 2.0
    sources = []
    for s in table["sources"]:
        a, b = s["semi_axes"]
        sources.append(SourceSpec(
            amplitude=float(s["amplitude"]),
            center=(s["center"][0] * h, s["center"][1] * h),
            semi_axes=(a * h, b * h),
            phi=math.radians(s.get("phi_deg", 0.0)),
            diffusion=float(s.get("diffusion", 0.05)),
            profile=s.get("profile", "fermi"),
            roi=bool(s.get("roi", True)),
            name=s.get("name", ""),
        ))
    return PhantomSpec(n=n, background=float(table.get("background", 0.0)),
                       sources=tuple(sources), name=name)


def with_n(spec: PhantomSpec, n: int) -> PhantomSpec:
    """Rescale a spec's geometry to another grid size."""
    f = n / spec.n
    sources = tuple(
        replace(s, center=(s.center[0] * f, s.center[1] * f),
                semi_axes=(s.semi_axes[0] * f, s.semi_axes[1] * f))
        for s in spec.sources)
    return replace(spec, n=n, sources=sources)
