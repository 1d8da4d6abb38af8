"""Pixel-wise ridge-regression density estimator.

Each cell's density is predicted as a linear function of the raw image patch
centered on it (mirror-padded at the borders) plus a bias. Training solves
the ridge normal equations in closed form, leaving the bias unpenalized.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg, ndimage

from .core import DensityMap, RoiMask
from .errors import FormatError, SingularityError, ValidationError

MAGIC = b"RRM1"
DEFAULT_PATCH_SIZE = 15
DEFAULT_LAMBDA = 1e-2
_HEADER = struct.Struct("<4sId")


@dataclass(frozen=True, eq=False)
class RidgeModel:
    """Linear patch regressor; ``weights[-1]`` is the bias.

    ``patch_size`` is ``None`` for models trained on generic feature vectors
    whose length is not ``p*p + 1`` for an odd ``p``; such models cannot be
    applied to images.
    """

    patch_size: int | None
    weights: np.ndarray
    ridge_lambda: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).ravel()
        if not np.all(np.isfinite(w)):
            raise ValidationError("model weights must be finite")
        if self.ridge_lambda < 0:
            raise ValidationError(f"ridge lambda must be >= 0, got {self.ridge_lambda}")
        if self.patch_size is not None:
            _check_patch_size(self.patch_size)
            if w.size != self.patch_size**2 + 1:
                raise ValidationError(
                    f"patch size {self.patch_size} needs {self.patch_size ** 2 + 1} weights, got {w.size}"
                )
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def kernel(self) -> np.ndarray:
        p = self._need_patch()
        return self.weights[:-1].reshape(p, p)

    @property
    def bias(self) -> float:
        return float(self.weights[-1])

    def scaled(self, alpha: float) -> "RidgeModel":
        return RidgeModel(self.patch_size, alpha * self.weights, self.ridge_lambda)

    def _need_patch(self) -> int:
        if self.patch_size is None:
            raise ValidationError("model was not trained on image patches")
        return self.patch_size


def _check_patch_size(p) -> int:
    if int(p) != p or p < 1 or p % 2 == 0:
        raise ValidationError(f"patch size must be a positive odd integer, got {p}")
    return int(p)


def _image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValidationError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValidationError("image contains non-finite values")
    return img


def _padded(img: np.ndarray, half: int) -> np.ndarray:
    h, w = img.shape
    if half > h - 1 or half > w - 1:
        raise ValidationError(f"patch half-width {half} is too large for a {w}x{h} image to be mirror-padded")
    return np.pad(img, half, mode="reflect")


def extract_patch(image, center, patch_size: int) -> np.ndarray:
    """Row-major intensities of the patch centered on the cell holding ``center``, then 1."""
    p = _check_patch_size(patch_size)
    img = _image(image)
    h, w = img.shape
    col, row = math.floor(center[0]), math.floor(center[1])
    if not (0 <= row < h and 0 <= col < w):
        raise ValidationError(f"center ({center[0]:g}, {center[1]:g}) is outside the {w}x{h} image")
    half = p // 2
    pad = _padded(img, half)
    patch = pad[row : row + p, col : col + p]
    return np.append(patch.ravel(), 1.0)


def patch_matrix(image, patch_size: int, cells=None) -> np.ndarray:
    """Feature rows (patch + bias) for ``cells`` (flat indices; default all cells)."""
    p = _check_patch_size(patch_size)
    img = _image(image)
    pad = _padded(img, p // 2)
    views = sliding_window_view(pad, (p, p))  # (h, w, p, p)
    flat = views.reshape(-1, p * p)
    rows = flat if cells is None else flat[np.asarray(cells, dtype=np.intp)]
    return np.hstack([rows, np.ones((rows.shape[0], 1))])


def _penalty(d: int, lam: float) -> np.ndarray:
    pen = np.full(d, float(lam))
    pen[-1] = 0.0
    return pen


def solve_normal_equations(gram: np.ndarray, xty: np.ndarray, ridge_lambda: float) -> np.ndarray:
    """Solve ``(G + lambda I') w = b`` with the bias (last) coordinate unpenalized."""
    gram = np.asarray(gram, dtype=np.float64)
    xty = np.asarray(xty, dtype=np.float64).ravel()
    d = xty.size
    if gram.shape != (d, d):
        raise ValidationError(f"Gram matrix shape {gram.shape} does not match {d} features")
    if ridge_lambda < 0:
        raise ValidationError(f"ridge lambda must be >= 0, got {ridge_lambda}")
    lhs = gram + np.diag(_penalty(d, ridge_lambda))
    scale = max(float(np.abs(np.diag(lhs)).max()), 1e-300)
    eig = linalg.eigvalsh(lhs)
    if eig[0] <= d * np.finfo(float).eps * scale * 10:
        raise SingularityError(
            f"normal equations are singular (smallest eigenvalue {eig[0]:.3g}); use ridge lambda > 0"
        )
    w = linalg.solve(lhs, xty, assume_a="pos")
    # one round of iterative refinement keeps the relative residual tiny
    w = w + linalg.solve(lhs, xty - lhs @ w, assume_a="pos")
    return w


def _infer_patch_size(d: int) -> int | None:
    p = math.isqrt(max(d - 1, 0))
    return p if p * p == d - 1 and p % 2 == 1 else None


def train_ridge(features, targets, ridge_lambda: float = DEFAULT_LAMBDA, patch_size: int | None = None) -> RidgeModel:
    """Closed-form ridge fit; feature vectors already carry the bias as their last entry."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64).ravel()
    if X.shape[0] < 1 or X.shape[0] != y.size:
        raise ValidationError(f"need >= 1 sample and matching targets, got {X.shape[0]} rows and {y.size} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError("features and targets must be finite")
    w = solve_normal_equations(X.T @ X, X.T @ y, ridge_lambda)
    if patch_size is None:
        patch_size = _infer_patch_size(X.shape[1])
    return RidgeModel(patch_size, w, float(ridge_lambda))


def _sample_cells(shape, roi: RoiMask | None, stride: int) -> np.ndarray:
    inside = np.ones(shape, dtype=bool) if roi is None else roi.inside
    if roi is not None and roi.shape != shape:
        raise ValidationError(f"ROI {roi.shape} does not match image {shape}")
    grid = np.zeros(shape, dtype=bool)
    grid[::stride, ::stride] = True
    return np.flatnonzero(inside & grid)


def fit_estimator(
    images,
    densities,
    patch_size: int = DEFAULT_PATCH_SIZE,
    ridge_lambda: float = DEFAULT_LAMBDA,
    roi: RoiMask | None = None,
    stride: int = 1,
) -> RidgeModel:
    """Train on every ROI cell (every ``stride``-th row and column) of the given frames.

    Sufficient statistics are accumulated frame by frame, so memory does
    not grow with the number of frames.
    """
    p = _check_patch_size(patch_size)
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if len(images) == 0 or len(images) != len(densities):
        raise ValidationError(f"need matching, non-empty image and density lists, got {len(images)}/{len(densities)}")
    d = p * p + 1
    gram = np.zeros((d, d))
    xty = np.zeros(d)
    n = 0
    for img, dens in zip(images, densities):
        img = _image(img)
        target = np.asarray(getattr(dens, "values", dens), dtype=np.float64)
        if target.shape != img.shape:
            raise ValidationError(f"density {target.shape} does not match image {img.shape}")
        cells = _sample_cells(img.shape, roi, stride)
        X = patch_matrix(img, p, cells)
        gram += X.T @ X
        xty += X.T @ target.ravel()[cells]
        n += len(cells)
    if n == 0:
        raise ValidationError("no training cells inside the ROI")
    return RidgeModel(p, solve_normal_equations(gram, xty, ridge_lambda), float(ridge_lambda))


def predict_density(model: RidgeModel, image, roi: RoiMask | None = None) -> DensityMap:
    """Apply the model at every cell; cells outside ``roi`` are 0."""
    p = model._need_patch()
    img = _image(image)
    _padded(img, p // 2)  # size check
    # mirror mode of ndimage matches numpy's reflect padding
    out = ndimage.correlate(img, model.kernel, mode="mirror") + model.bias
    if roi is not None:
        if roi.shape != img.shape:
            raise ValidationError(f"ROI {roi.shape} does not match image {img.shape}")
        out = np.where(roi.inside, out, 0.0)
    return DensityMap(out, roi=roi, is_prediction=True)


def count_baseline(train_counts) -> float:
    """Constant predictor: the mean training count."""
    c = np.asarray(train_counts, dtype=np.float64)
    if c.size == 0:
        raise ValidationError("need at least one training count")
    return float(c.mean())


def encode_model(model: RidgeModel) -> bytes:
    p = model._need_patch()
    return _HEADER.pack(MAGIC, p, model.ridge_lambda) + model.weights.astype("<f8").tobytes()


def decode_model(data: bytes) -> RidgeModel:
    if len(data) < _HEADER.size:
        raise FormatError(f"model file is {len(data)} bytes, shorter than its {_HEADER.size}-byte header", 0)
    magic, p, lam = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if p < 1 or p % 2 == 0:
        raise FormatError(f"patch size {p} is not a positive odd integer", 4)
    need = (p * p + 1) * 8
    body = data[_HEADER.size :]
    if len(body) != need:
        raise FormatError(f"expected {need} weight bytes for patch size {p}, found {len(body)}", _HEADER.size)
    w = np.frombuffer(body, dtype="<f8").astype(np.float64)
    try:
        return RidgeModel(int(p), w, float(lam))
    except ValidationError as exc:
        raise FormatError(str(exc), _HEADER.size) from exc


def save_model(model: RidgeModel, path) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path) -> RidgeModel:
    return decode_model(Path(path).read_bytes())
