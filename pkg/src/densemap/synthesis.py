"""Ground-truth density maps from dot annotations.

Each dot contributes an isotropic Gaussian of unit mass. The value stored in
a cell is the Gaussian mass falling on that cell (the integral over the unit
square), which keeps box sums consistent with the continuous integral even
for small ``sigma``. Kernels are truncated per axis at
``truncation_radius * sigma`` measured from the dot to the cell centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .core import DensityMap, DotAnnotations, PerspectiveMap, RoiMask, as_points
from .errors import ValidationError

FIXED = "fixed"
PERSPECTIVE = "perspective"
RENORMALIZE = "renormalize"
NO_NORMALIZATION = "none"


@dataclass(frozen=True, eq=False)
class SynthesisConfig:
    sigma: float = 4.0
    mode: str = FIXED
    perspective: PerspectiveMap | None = None
    reference_scale: float = 1.0
    truncation_radius: float = 4.0
    normalization: str = RENORMALIZE

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        if self.mode not in (FIXED, PERSPECTIVE):
            raise ValidationError(f"mode must be '{FIXED}' or '{PERSPECTIVE}', got {self.mode!r}")
        if (self.perspective is not None) != (self.mode == PERSPECTIVE):
            raise ValidationError("a perspective map is required in perspective mode and only there")
        if not self.reference_scale > 0:
            raise ValidationError(f"reference_scale must be > 0, got {self.reference_scale}")
        if not self.truncation_radius >= 3:
            raise ValidationError(f"truncation_radius must be >= 3, got {self.truncation_radius}")
        if self.normalization not in (RENORMALIZE, NO_NORMALIZATION):
            raise ValidationError(
                f"normalization must be '{RENORMALIZE}' or '{NO_NORMALIZATION}', got {self.normalization!r}"
            )


def effective_sigma(cfg: SynthesisConfig, at) -> float:
    """Gaussian width used for a dot at ``at``; perspective mode scales it linearly."""
    if cfg.mode == FIXED:
        return cfg.sigma
    return cfg.sigma * cfg.perspective.at(at) / cfg.reference_scale


def peak_density(sigma: float) -> float:
    """Largest cell value of a lone, cell-centered unit kernel."""
    half = float(ndtr(0.5 / sigma) - ndtr(-0.5 / sigma))
    return half * half


def _axis_kernel(center: float, sigma: float, radius: float, size: int) -> tuple[int, np.ndarray]:
    """Cell masses of a 1D Gaussian along one axis: returns (first cell index, masses)."""
    fl = math.floor(center)
    frac = center - fl
    reach = radius * sigma
    # offsets k with |k + 0.5 - frac| <= reach, evaluated relative to the dot's cell
    lo_off = math.ceil(frac - 0.5 - reach)
    hi_off = math.floor(frac - 0.5 + reach)
    lo = max(fl + lo_off, 0)
    hi = min(fl + hi_off, size - 1)
    if hi < lo:
        return 0, np.zeros(0)
    k = np.arange(lo - fl, hi - fl + 1, dtype=np.float64)
    masses = ndtr((k + 1.0 - frac) / sigma) - ndtr((k - frac) / sigma)
    return lo, masses


def dot_kernel(point, sigma: float, cfg: SynthesisConfig, width: int, height: int):
    """Truncated kernel of one dot: ``(row0, col0, block)`` with ``block`` the cell masses."""
    x, y = float(point[0]), float(point[1])
    c0, gx = _axis_kernel(x, sigma, cfg.truncation_radius, width)
    r0, gy = _axis_kernel(y, sigma, cfg.truncation_radius, height)
    block = np.outer(gy, gx)
    if cfg.normalization == RENORMALIZE:
        s = block.sum()
        if s > 0:
            block = block / s
    return r0, c0, block


def synthesize_points(points, cfg: SynthesisConfig, width: int, height: int) -> DensityMap:
    """Density map of an explicit point set (see :func:`synthesize_density`)."""
    pts = as_points(points)
    bad = (pts[:, 0] < 0) | (pts[:, 0] >= width) | (pts[:, 1] < 0) | (pts[:, 1] >= height)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"dot #{i} at ({pts[i, 0]:g}, {pts[i, 1]:g}) is outside the {width}x{height} frame")
    out = np.zeros((height, width), dtype=np.float64)
    for p in pts:
        r0, c0, block = dot_kernel(p, effective_sigma(cfg, p), cfg, width, height)
        out[r0 : r0 + block.shape[0], c0 : c0 + block.shape[1]] += block
    return DensityMap(out)


def synthesize_density(
    ann: DotAnnotations, frame_id: int, cfg: SynthesisConfig, width: int | None = None, height: int | None = None
) -> DensityMap:
    """Ground-truth density for one annotated frame.

    ``width``/``height`` default to the annotation's frame size.
    """
    frame = ann.frame(frame_id)
    width = ann.width if width is None else width
    height = ann.height if height is None else height
    return synthesize_points(frame.points, cfg, width, height)


def ground_truth_count(ann: DotAnnotations, frame_id: int, roi: RoiMask) -> int:
    """Number of annotated dots whose containing cell is inside ``roi``."""
    frame = ann.frame(frame_id)
    return int(roi.contains(frame.points).sum())
