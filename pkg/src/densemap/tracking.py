"""Single-target linear correlation-filter tracker with density-map fusion.

The filter is the closed-form ridge solution in the Fourier domain that maps
the (normalized, cosine-windowed) target patch to a Gaussian peak. Fusion
multiplies the non-negative-shifted response by the density map crop and
takes the argmax of the product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import DensityMap, Point2
from .errors import ValidationError

VARIANT = "linear-correlation-filter"
DEFAULT_WINDOW = (24, 24)  # about four blob diameters at the default render scale


@dataclass(frozen=True)
class TrackerConfig:
    learning_rate: float = 0.02
    regularization: float = 1e-2
    target_sigma: float | None = None  # None: window / 10
    cosine_window: bool = True

    def __post_init__(self):
        if not 0 <= self.learning_rate <= 1:
            raise ValidationError(f"learning rate must lie in [0, 1], got {self.learning_rate}")
        if not self.regularization > 0:
            raise ValidationError(f"regularization must be > 0, got {self.regularization}")
        if self.target_sigma is not None and not self.target_sigma > 0:
            raise ValidationError("target sigma must be > 0")


@dataclass(frozen=True, eq=False)
class TrackState:
    template: np.ndarray  # complex filter spectrum, shape (window_h, window_w)
    window: tuple[int, int]  # (width, height)
    position: Point2
    config: TrackerConfig


@dataclass(frozen=True, eq=False)
class ResponseMap:
    values: np.ndarray
    origin: Point2  # frame (col, row) of cell (0, 0)

    @property
    def shape(self):
        return self.values.shape

    def argmax_cell(self) -> tuple[int, int]:
        r, c = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(r), int(c)


def _check_window(image: np.ndarray, window) -> tuple[int, int]:
    ww, wh = int(window[0]), int(window[1])
    if ww < 4 or wh < 4 or ww % 2 or wh % 2:
        raise ValidationError(f"window must be even-sized and at least 4x4, got {ww}x{wh}")
    h, w = image.shape
    if ww // 2 > w - 1 or wh // 2 > h - 1:
        raise ValidationError(f"window {ww}x{wh} does not fit a {w}x{h} frame after mirror padding")
    return ww, wh


def patch_origin(position, window) -> tuple[int, int]:
    """Top-left ``(col, row)`` of the window whose center cell contains ``position``."""
    return math.floor(position[0]) - window[0] // 2, math.floor(position[1]) - window[1] // 2


def extract_window(image: np.ndarray, position, window) -> tuple[np.ndarray, tuple[int, int]]:
    """Raw mirror-padded crop of ``window`` around ``position`` and its origin."""
    ww, wh = window
    c0, r0 = patch_origin(position, window)
    pad = max(ww, wh)
    padded = np.pad(image, pad, mode="reflect")
    crop = padded[r0 + pad : r0 + pad + wh, c0 + pad : c0 + pad + ww]
    return crop, (c0, r0)


def _cosine(window) -> np.ndarray:
    ww, wh = window
    return np.outer(np.hanning(wh), np.hanning(ww))


def _features(crop: np.ndarray, cfg: TrackerConfig) -> np.ndarray:
    p = crop - crop.mean()
    p = p / (p.std() + 1e-5)
    if cfg.cosine_window:
        p = p * _cosine((crop.shape[1], crop.shape[0]))
    return np.fft.fft2(p, norm="ortho")


def target_spectrum(window, cfg: TrackerConfig) -> np.ndarray:
    ww, wh = window
    s = cfg.target_sigma if cfg.target_sigma is not None else math.sqrt(ww * wh) / 10.0
    yy = np.arange(wh)[:, None] - wh // 2
    xx = np.arange(ww)[None, :] - ww // 2
    g = np.exp(-(xx**2 + yy**2) / (2 * s * s))
    return np.fft.fft2(g, norm="ortho")


def fit_filter(spectrum: np.ndarray, target: np.ndarray, regularization: float) -> np.ndarray:
    """Per-frequency ridge solution of ``H * F = G``."""
    return target * np.conj(spectrum) / (spectrum * np.conj(spectrum) + regularization)


def filter_residual(template: np.ndarray, spectrum: np.ndarray, target: np.ndarray, regularization: float) -> float:
    """Relative residual of the normal equations ``(|F|^2 + lambda) H = G conj(F)``."""
    lhs = (np.abs(spectrum) ** 2 + regularization) * template
    rhs = target * np.conj(spectrum)
    denom = np.linalg.norm(rhs)
    return float(np.linalg.norm(lhs - rhs) / denom) if denom > 0 else float(np.linalg.norm(lhs))


def init_tracker(image: np.ndarray, center, window=DEFAULT_WINDOW, cfg: TrackerConfig = TrackerConfig()) -> TrackState:
    image = np.asarray(image, dtype=np.float64)
    window = _check_window(image, window)
    crop, _ = extract_window(image, center, window)
    template = fit_filter(_features(crop, cfg), target_spectrum(window, cfg), cfg.regularization)
    return TrackState(template, window, Point2(float(center[0]), float(center[1])), cfg)


def tracker_response(state: TrackState, image: np.ndarray) -> ResponseMap:
    """Correlation of the learned filter with the window around the current position."""
    image = np.asarray(image, dtype=np.float64)
    crop, (c0, r0) = extract_window(image, state.position, state.window)
    resp = np.real(np.fft.ifft2(state.template * _features(crop, state.config), norm="ortho"))
    return ResponseMap(resp, Point2(c0, r0))


def crop_density(density: DensityMap, origin, shape) -> np.ndarray:
    """Clamped density over the response window; cells outside the frame are 0."""
    h, w = shape
    c0, r0 = int(origin[0]), int(origin[1])
    out = np.zeros((h, w))
    src = np.maximum(density.values, 0.0)
    rs, re = max(r0, 0), min(r0 + h, density.height)
    cs, ce = max(c0, 0), min(c0 + w, density.width)
    if rs < re and cs < ce:
        out[rs - r0 : re - r0, cs - c0 : ce - c0] = src[rs:re, cs:ce]
    return out


def fuse_response(resp: ResponseMap, density_crop) -> ResponseMap:
    """Element-wise product of the min-shifted response and an aligned density crop."""
    crop = np.asarray(getattr(density_crop, "values", density_crop), dtype=np.float64)
    if crop.shape != resp.shape:
        raise ValidationError(f"density crop {crop.shape} is not aligned with response {resp.shape}")
    shifted = resp.values - resp.values.min()
    return ResponseMap(shifted * np.maximum(crop, 0.0), resp.origin)


def track_step(
    state: TrackState, image: np.ndarray, density: DensityMap | None = None
) -> tuple[TrackState, Point2]:
    """Locate the target in ``image`` and update the filter at the new position.

    With a density map the fused response decides; an all-zero fused map
    falls back to the raw response.
    """
    image = np.asarray(image, dtype=np.float64)
    resp = tracker_response(state, image)
    chosen = resp
    if density is not None:
        fused = fuse_response(resp, crop_density(density, resp.origin, resp.shape))
        if fused.values.max() > 0:
            chosen = fused
    r, c = chosen.argmax_cell()
    h, w = image.shape
    col = min(max(int(resp.origin[0]) + c, 0), w - 1)
    row = min(max(int(resp.origin[1]) + r, 0), h - 1)
    position = Point2(col + 0.5, row + 0.5)
    cfg = state.config
    template = state.template
    if cfg.learning_rate > 0:
        crop, _ = extract_window(image, position, state.window)
        fresh = fit_filter(_features(crop, cfg), target_spectrum(state.window, cfg), cfg.regularization)
        template = (1 - cfg.learning_rate) * template + cfg.learning_rate * fresh
    return replace(state, template=template, position=position), position


def run_tracker(
    images, init_center, window=DEFAULT_WINDOW, cfg: TrackerConfig = TrackerConfig(), densities=None
) -> list[Point2]:
    """Track through ``images`` starting from ``init_center`` on the first frame.

    Returns one position per frame; the first is the initialization point.
    """
    state = init_tracker(images[0], init_center, window, cfg)
    positions = [state.position]
    for t in range(1, len(images)):
        dens = None if densities is None else densities[t]
        state, pos = track_step(state, images[t], dens)
        positions.append(pos)
    return positions


def smooth_densities(densities, span: int = 1) -> list:
    """Causal moving average of each map with up to ``span - 1`` preceding maps.

    ``span = 1`` returns the maps unchanged; ``None`` entries pass through.
    """
    if span < 1:
        raise ValidationError(f"smoothing span must be >= 1, got {span}")
    out = []
    for t, dens in enumerate(densities):
        if span == 1 or dens is None:
            out.append(dens)
            continue
        window = [d for d in densities[max(0, t - span + 1) : t + 1] if d is not None]
        out.append(DensityMap(np.mean([d.values for d in window], axis=0), dens.roi, dens.is_prediction))
    return out
