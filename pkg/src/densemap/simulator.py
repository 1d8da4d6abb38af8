"""Synthetic crowd scenes: moving dots under a row-linear perspective,
rendered as bright Gaussian blobs on a dark background.

Randomness comes from numpy's PCG64 bit generator seeded with the scene
seed, so runs reproduce across platforms.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import DotAnnotations, Frame, PerspectiveMap
from .errors import ValidationError


@dataclass(frozen=True)
class SceneConfig:
    width: int = 238
    height: int = 158
    n_people: int = 20
    n_frames: int = 50
    top_scale: float = 0.6
    bottom_scale: float = 1.2
    person_render_sigma: float = 3.0
    speed: float = 1.0
    noise_sigma: float = 0.02
    seed: int = 0
    background: float = 0.1
    amplitude: float = 0.8
    jitter: float = 0.15
    n_clutter: int = 0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValidationError(f"scene must be at least 8x8, got {self.width}x{self.height}")
        if self.n_people < 0 or self.n_frames < 1 or self.n_clutter < 0:
            raise ValidationError("need n_people >= 0, n_clutter >= 0 and n_frames >= 1")
        if not (0 < self.top_scale <= self.bottom_scale):
            raise ValidationError("need 0 < top_scale <= bottom_scale")
        if self.person_render_sigma <= 0 or self.speed < 0 or self.noise_sigma < 0 or self.jitter < 0:
            raise ValidationError("render sigma must be > 0; speed, noise and jitter must be >= 0")
        if not (0 <= self.background and self.background + self.amplitude <= 1):
            raise ValidationError("background + amplitude must stay within [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Scene:
    config: SceneConfig
    images: list
    clean_images: list = field(repr=False)
    annotations: DotAnnotations
    perspective: PerspectiveMap
    clutter: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # static, unannotated blobs


def scene_perspective(cfg: SceneConfig) -> PerspectiveMap:
    return PerspectiveMap.linear_rows(cfg.width, cfg.height, cfg.top_scale, cfg.bottom_scale)


def render_frame(points: np.ndarray, cfg: SceneConfig, perspective: PerspectiveMap) -> np.ndarray:
    """Noise-free frame: background plus the per-pixel maximum over person blobs."""
    h, w = cfg.height, cfg.width
    blobs = np.zeros((h, w))
    for x, y in points:
        s = cfg.person_render_sigma * perspective.at((x, y))
        reach = int(math.ceil(4 * s))
        r0, r1 = max(int(y) - reach, 0), min(int(y) + reach + 1, h)
        c0, c1 = max(int(x) - reach, 0), min(int(x) + reach + 1, w)
        yy = (np.arange(r0, r1) + 0.5)[:, None] - y
        xx = (np.arange(c0, c1) + 0.5)[None, :] - x
        blob = cfg.amplitude * np.exp(-(xx * xx + yy * yy) / (2 * s * s))
        np.maximum(blobs[r0:r1, c0:c1], blob, out=blobs[r0:r1, c0:c1])
    return cfg.background + blobs


def _reflect(pos: np.ndarray, vel: np.ndarray, lo: float, hi: float) -> None:
    for _ in range(4):
        below = pos < lo
        pos[below] = 2 * lo - pos[below]
        vel[below] = -vel[below]
        above = pos > hi
        pos[above] = 2 * hi - pos[above]
        vel[above] = -vel[above]
    np.clip(pos, lo, hi, out=pos)


def _finish(cfg: SceneConfig, tracks: np.ndarray, rng: np.random.Generator, clutter=None) -> Scene:
    """Render every frame of ``tracks`` (shape n_frames x n_people x 2) and add noise.

    ``clutter`` blobs look like people but stay put and are not annotated.
    """
    persp = scene_perspective(cfg)
    clutter = np.zeros((0, 2)) if clutter is None else np.asarray(clutter, dtype=np.float64).reshape(-1, 2)
    images, clean, frames = [], [], []
    ids = tuple(range(tracks.shape[1]))
    for t in range(cfg.n_frames):
        pts = tracks[t]
        img = render_frame(np.vstack([pts, clutter]), cfg, persp)
        clean.append(img)
        noisy = img + cfg.noise_sigma * rng.standard_normal(img.shape) if cfg.noise_sigma > 0 else img.copy()
        images.append(np.clip(noisy, 0.0, 1.0))
        frames.append(Frame(t, pts.copy(), ids))
    ann = DotAnnotations(cfg.width, cfg.height, tuple(frames))
    return Scene(cfg, images, clean, ann, persp, clutter)


def simulate_scene(cfg: SceneConfig) -> Scene:
    """Constant-velocity walkers with small Gaussian jitter, reflecting at the frame borders.

    ``n_clutter`` static blobs are drawn after the walkers, so adding
    clutter leaves the trajectories unchanged.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = cfg.n_people
    lo = np.array([0.5, 0.5])
    hi = np.array([cfg.width - 0.5, cfg.height - 0.5])
    pos = lo + rng.random((n, 2)) * (hi - lo)
    angle = rng.random(n) * 2 * math.pi
    vel = cfg.speed * np.column_stack([np.cos(angle), np.sin(angle)])
    tracks = np.zeros((cfg.n_frames, n, 2))
    for t in range(cfg.n_frames):
        if t > 0:
            pos = pos + vel + cfg.jitter * cfg.speed * rng.standard_normal((n, 2))
            for axis in range(2):
                p, v = pos[:, axis].copy(), vel[:, axis].copy()
                _reflect(p, v, lo[axis], hi[axis])
                pos[:, axis], vel[:, axis] = p, v
        tracks[t] = pos
    clutter = None
    if cfg.n_clutter:
        crng = np.random.Generator(np.random.PCG64([cfg.seed, 1]))
        clutter = lo + crng.random((cfg.n_clutter, 2)) * (hi - lo)
    return _finish(cfg, tracks, rng, clutter)


def scenario_distractor(cfg: SceneConfig, min_gap: float | None = None, clutter: bool = True) -> Scene:
    """Two identical people on straight paths that pass closest at the middle frame.

    Person 0 is the target and person 1 the distractor. Their closest
    approach is ``min_gap`` pixels (default: one blob diameter, two render
    sigmas at the crossing point), reached at frame ``n_frames // 2``.
    With ``clutter`` a static, unannotated blob sits on the target's path
    at frame ``3 * n_frames // 4``; an appearance-only tracker tends to
    stick to it as the target walks past. ``cfg.n_clutter`` is ignored.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    persp = scene_perspective(cfg)
    mid = cfg.n_frames // 2
    cx = cfg.width * (0.4 + 0.2 * rng.random())
    cy = cfg.height * (0.4 + 0.2 * rng.random())
    if min_gap is None:
        min_gap = 2 * cfg.person_render_sigma * persp.at((cx, cy))
    heading = rng.random() * 2 * math.pi
    d = np.array([math.cos(heading), math.sin(heading)])
    normal = np.array([-d[1], d[0]])
    t = np.arange(cfg.n_frames) - mid
    center = np.array([cx, cy])
    a = center + 0.5 * min_gap * normal + np.outer(t * cfg.speed, d)
    b = center - 0.5 * min_gap * normal - np.outer(t * cfg.speed, d)
    tracks = np.stack([a, b], axis=1)
    tracks[..., 0] = np.clip(tracks[..., 0], 0.5, cfg.width - 0.5)
    tracks[..., 1] = np.clip(tracks[..., 1], 0.5, cfg.height - 0.5)
    two = SceneConfig(**{**cfg.to_dict(), "n_people": 2, "n_clutter": 0})
    blobs = tracks[3 * cfg.n_frames // 4, :1].copy() if clutter else None
    return _finish(two, tracks, rng, blobs)
