"""Domain types, ROI handling and file I/O shared by every other module.

Conventions used throughout the package:

* grids are row-major numpy arrays of shape ``(height, width)``, y pointing down;
* a point ``(x, y)`` lies in cell ``(row, col) = (floor(y), floor(x))``;
* the center of cell ``(row, col)`` is the point ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    FormatError,
    NotFoundError,
    SizeMismatchError,
    ValidationError,
)

RASTER_MAGIC = b"DMF1"
_HEADER = struct.Struct("<4sII")


class Point2(NamedTuple):
    """A location in pixel units: ``x`` along columns, ``y`` along rows."""

    x: float
    y: float


def as_points(points) -> np.ndarray:
    """Coerce a sequence of points (Point2, pairs, or an array) to a float ``(n, 2)`` array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError(f"expected an (n, 2) array of points, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("points must be finite")
    return arr


def point_cells(points) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(rows, cols)`` integer arrays of the cells containing ``points``."""
    arr = as_points(points)
    return np.floor(arr[:, 1]).astype(np.intp), np.floor(arr[:, 0]).astype(np.intp)


def cell_center(row: int, col: int) -> Point2:
    return Point2(col + 0.5, row + 0.5)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RoiMask:
    """Boolean region-of-interest mask, ``inside[row, col]``."""

    inside: np.ndarray

    def __post_init__(self):
        inside = np.asarray(self.inside)
        if inside.ndim != 2 or inside.shape[0] < 1 or inside.shape[1] < 1:
            raise ValidationError(f"ROI mask must be a non-empty 2D grid, got shape {inside.shape}")
        object.__setattr__(self, "inside", _readonly(inside.astype(bool)))

    @classmethod
    def full(cls, width: int, height: int) -> "RoiMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.inside.shape[1]

    @property
    def height(self) -> int:
        return self.inside.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.inside.shape

    def count(self) -> int:
        return int(self.inside.sum())

    def contains(self, points) -> np.ndarray:
        """Boolean per point: is the containing cell inside the ROI."""
        rows, cols = point_cells(points)
        ok = (rows >= 0) & (rows < self.height) & (cols >= 0) & (cols < self.width)
        out = np.zeros(len(rows), dtype=bool)
        out[ok] = self.inside[rows[ok], cols[ok]]
        return out


@dataclass(frozen=True, eq=False)
class DensityMap:
    """A grid of densities (objects per pixel) with an optional ROI.

    ``is_prediction`` marks raw estimator output, the only kind of map
    allowed to hold negative values.
    """

    values: np.ndarray
    roi: RoiMask | None = None
    is_prediction: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(f"density map must be a non-empty 2D grid, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("density map values must be finite")
        if not self.is_prediction and np.any(values < 0):
            raise ValidationError("negative density is only allowed in maps flagged as predictions")
        if self.roi is not None and self.roi.shape != values.shape:
            raise ValidationError(f"ROI shape {self.roi.shape} does not match map shape {values.shape}")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def total(self) -> float:
        """Sum over the map's own ROI, or over every cell when it has none."""
        if self.roi is None:
            return float(self.values.sum())
        return sum_in_roi(self, self.roi)

    def clamped(self) -> np.ndarray:
        """Values with negatives set to 0 and cells outside the ROI zeroed."""
        out = np.maximum(self.values, 0.0)
        if self.roi is not None:
            out = np.where(self.roi.inside, out, 0.0)
        return out

    def with_roi(self, roi: RoiMask | None) -> "DensityMap":
        return DensityMap(self.values, roi, self.is_prediction)


@dataclass(frozen=True, eq=False)
class PerspectiveMap:
    """Per-cell apparent-size scale (ratio against a reference height)."""

    scale: np.ndarray

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64)
        if scale.ndim != 2 or scale.shape[0] < 1 or scale.shape[1] < 1:
            raise ValidationError(f"perspective map must be a non-empty 2D grid, got shape {scale.shape}")
        if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise ValidationError("perspective scale must be finite and > 0 everywhere")
        object.__setattr__(self, "scale", _readonly(scale))

    @classmethod
    def linear_rows(cls, width: int, height: int, top: float, bottom: float) -> "PerspectiveMap":
        """Scale varying linearly with the row, ``top`` at row 0 and ``bottom`` at the last row."""
        t = np.linspace(0.0, 1.0, height) if height > 1 else np.zeros(1)
        col = top + (bottom - top) * t
        return cls(np.repeat(col[:, None], width, axis=1))

    @property
    def width(self) -> int:
        return self.scale.shape[1]

    @property
    def height(self) -> int:
        return self.scale.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.scale.shape

    def at(self, point) -> float:
        x, y = float(point[0]), float(point[1])
        row, col = math.floor(y), math.floor(x)
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise ValidationError(f"point ({x}, {y}) lies outside the {self.width}x{self.height} perspective map")
        return float(self.scale[row, col])


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: int
    points: np.ndarray
    track_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", _readonly(as_points(self.points)))
        if self.track_ids is not None:
            ids = tuple(int(t) for t in self.track_ids)
            if len(ids) != len(self.points):
                raise ValidationError(
                    f"frame {self.frame_id}: {len(ids)} track ids for {len(self.points)} points"
                )
            object.__setattr__(self, "track_ids", ids)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class DotAnnotations:
    """Per-frame dot annotations on a ``width`` x ``height`` image."""

    width: int
    height: int
    frames: tuple[Frame, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"annotation frame size must be positive, got {self.width}x{self.height}")
        frames = tuple(self.frames)
        ids = [f.frame_id for f in frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValidationError(f"frame ids must be strictly increasing, got {ids}")
        for f in frames:
            p = f.points
            bad = np.flatnonzero(
                (p[:, 0] < 0) | (p[:, 0] >= self.width) | (p[:, 1] < 0) | (p[:, 1] >= self.height)
            )
            if bad.size:
                offenders = ", ".join(f"#{i} ({p[i, 0]:g}, {p[i, 1]:g})" for i in bad[:10])
                raise ValidationError(
                    f"frame {f.frame_id}: points outside the {self.width}x{self.height} frame: {offenders}"
                )
        object.__setattr__(self, "frames", frames)

    @property
    def frame_ids(self) -> list[int]:
        return [f.frame_id for f in self.frames]

    def frame(self, frame_id: int) -> Frame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise NotFoundError(f"no frame with id {frame_id}")

    def has_tracks(self) -> bool:
        return bool(self.frames) and all(f.track_ids is not None for f in self.frames)


# ---------------------------------------------------------------------------
# DMF1 rasters


def encode_raster(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        raise ValidationError(f"cannot encode a raster of shape {values.shape}; dimensions must be > 0")
    height, width = values.shape
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    return _HEADER.pack(RASTER_MAGIC, width, height) + payload


def decode_raster(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError(f"raster header needs {_HEADER.size} bytes, file has {len(data)}", offset=len(data))
    magic, width, height = _HEADER.unpack_from(data)
    if magic != RASTER_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {RASTER_MAGIC!r}", offset=0)
    if width == 0:
        raise FormatError("raster width is 0", offset=4)
    if height == 0:
        raise FormatError("raster height is 0", offset=8)
    expected = width * height * 4
    got = len(data) - _HEADER.size
    if got != expected:
        raise SizeMismatchError(
            f"payload has {got} bytes, header {width}x{height} requires {expected}", offset=_HEADER.size
        )
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(height, width)


def read_raster(path) -> DensityMap:
    """Read a DMF1 file as a density map.

    Maps containing negative cells come back flagged as predictions.
    """
    grid = decode_raster(Path(path).read_bytes())
    if not np.all(np.isfinite(grid)):
        raise FormatError(f"{path}: raster contains non-finite values")
    return DensityMap(grid.astype(np.float64), is_prediction=bool(np.any(grid < 0)))


def read_perspective(path) -> PerspectiveMap:
    return PerspectiveMap(decode_raster(Path(path).read_bytes()).astype(np.float64))


def write_raster(grid, path) -> None:
    """Write a DensityMap, PerspectiveMap or bare 2D array as DMF1 (float32 payload)."""
    if isinstance(grid, DensityMap):
        values = grid.values
    elif isinstance(grid, PerspectiveMap):
        values = grid.scale
    else:
        values = np.asarray(grid)
    Path(path).write_bytes(encode_raster(values))


# ---------------------------------------------------------------------------
# annotation JSON


def annotations_from_dict(doc: dict) -> DotAnnotations:
    try:
        width = int(doc["width"])
        height = int(doc["height"])
        raw_frames = doc["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"annotation document needs integer width/height and a frames list: {exc}") from exc
    frames = []
    seen = set()
    for entry in raw_frames:
        fid = int(entry["id"])
        if fid in seen:
            raise ValidationError(f"duplicate frame id {fid}")
        seen.add(fid)
        pts = entry.get("points", [])
        ids = entry.get("track_ids")
        frames.append(Frame(fid, pts, None if ids is None else tuple(ids)))
    frames.sort(key=lambda f: f.frame_id)
    return DotAnnotations(width, height, tuple(frames))


def annotations_to_dict(ann: DotAnnotations) -> dict:
    frames = []
    for f in ann.frames:
        entry = {"id": f.frame_id, "points": [[float(x), float(y)] for x, y in f.points]}
        if f.track_ids is not None:
            entry["track_ids"] = list(f.track_ids)
        frames.append(entry)
    return {"width": ann.width, "height": ann.height, "frames": frames}


def parse_annotations(path) -> DotAnnotations:
    """Load the JSON annotation format; frames come back sorted by id."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    return annotations_from_dict(doc)


def write_annotations(ann: DotAnnotations, path) -> None:
    Path(path).write_text(json.dumps(annotations_to_dict(ann), indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# ROI


def rasterize_roi(polygon: Sequence, width: int, height: int) -> RoiMask:
    """Even-odd rasterization of a closed polygon, sampled at cell centers."""
    poly = as_points(polygon)
    if len(poly) < 3:
        raise ValidationError(f"ROI polygon needs at least 3 vertices, got {len(poly)}")
    if width < 1 or height < 1:
        raise ValidationError(f"ROI dimensions must be positive, got {width}x{height}")
    cx = np.arange(width) + 0.5
    cy = (np.arange(height) + 0.5)[:, None]
    inside = np.zeros((height, width), dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        # half-open in y so a vertex shared by two edges is counted once
        crosses = (ay > cy) != (by > cy)
        x_at = ax + (cy - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (cx < x_at)
    return RoiMask(inside)


def load_roi(path, width: int, height: int) -> RoiMask:
    """Load an ROI from a JSON polygon ``{"roi": [[x, y], ...]}`` or a DMF1 mask (> 0.5 inside)."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == RASTER_MAGIC:
        grid = decode_raster(data)
        if grid.shape != (height, width):
            raise ValidationError(f"ROI raster is {grid.shape[1]}x{grid.shape[0]}, expected {width}x{height}")
        return RoiMask(grid > 0.5)
    try:
        doc = json.loads(data.decode("utf-8"))
        polygon = doc["roi"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: expected a DMF1 raster or a JSON object with an 'roi' polygon") from exc
    return rasterize_roi(polygon, width, height)


def sum_in_roi(dmap: DensityMap, roi: RoiMask) -> float:
    """Plain sum of (possibly negative) cell values inside the ROI."""
    if roi.shape != dmap.shape:
        raise ValidationError(f"ROI shape {roi.shape} does not match map shape {dmap.shape}")
    if roi.count() == 0:
        raise ValidationError("ROI has no inside cells")
    return float(dmap.values[roi.inside].sum())


# ---------------------------------------------------------------------------
# 8-bit grayscale PGM


def write_pgm(image: np.ndarray, path) -> None:
    """Write a [0, 1] float image as binary 8-bit PGM (values rounded to 1/255)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValidationError(f"PGM images are 2D, got shape {image.shape}")
    q = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into a float image in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header", offset=pos)
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})", offset=0)
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    pos += 1
    payload = data[pos:]
    if len(payload) != width * height:
        raise SizeMismatchError(f"{path}: PGM payload has {len(payload)} bytes, expected {width * height}", offset=pos)
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0
