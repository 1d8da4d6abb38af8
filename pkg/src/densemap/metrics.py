"""Evaluation quantities: counting errors, GAME, training losses, per-pixel
fidelity, compactness/localization, temporal smoothness, detection matching
and tracking precision."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import DensityMap, PerspectiveMap, as_points
from .errors import DegenerateInputError, InfiniteLossError, ValidationError


def _check_same_shape(a: DensityMap, b: DensityMap):
    if a.shape != b.shape:
        raise ValidationError(f"map shapes differ: {a.shape} vs {b.shape}")


def _roi_inside(*maps: DensityMap) -> np.ndarray:
    """Cells to evaluate: intersection of the ROIs carried by ``maps`` (all cells if none)."""
    mask = np.ones(maps[0].shape, dtype=bool)
    for m in maps:
        if m.roi is not None:
            mask &= m.roi.inside
    return mask


# ---------------------------------------------------------------------------
# counting


def count_errors(pred: Sequence[float], gt: Sequence[float]) -> dict:
    """MAE and mean squared error of per-frame counts."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValidationError(f"count lists must be 1D and equally long, got {pred.shape} and {gt.shape}")
    if pred.size == 0:
        raise ValidationError("count lists are empty")
    diff = pred - gt
    return {"mae": float(np.mean(np.abs(diff))), "mse": float(np.mean(diff**2))}


def _split_bounds(n: int, level: int) -> list[int]:
    """Recursive bisection of ``range(n)`` into ``2**level`` parts; remainders go to the later part."""
    bounds = [0, n]
    for _ in range(level):
        nxt = [0]
        for a, b in zip(bounds, bounds[1:]):
            nxt += [a + (b - a) // 2, b]
        bounds = nxt
    return bounds


def game(pred: DensityMap, gt: DensityMap, level: int) -> float:
    """Grid average mean absolute error of one frame at level ``level``.

    The frame is split into ``2**level`` x ``2**level`` rectangles by
    repeated halving, so every level refines the previous one.
    """
    _check_same_shape(pred, gt)
    if level < 0:
        raise ValidationError(f"GAME level must be >= 0, got {level}")
    diff = np.where(_roi_inside(pred, gt), pred.values - gt.values, 0.0)
    if level == 0:
        return float(abs(diff.sum()))
    r = np.asarray(_split_bounds(diff.shape[0], level))
    c = np.asarray(_split_bounds(diff.shape[1], level))
    # region sums via a 2D prefix sum
    csum = np.zeros((diff.shape[0] + 1, diff.shape[1] + 1))
    csum[1:, 1:] = diff.cumsum(0).cumsum(1)
    block = (
        csum[np.ix_(r[1:], c[1:])]
        - csum[np.ix_(r[:-1], c[1:])]
        - csum[np.ix_(r[1:], c[:-1])]
        + csum[np.ix_(r[:-1], c[:-1])]
    )
    return float(np.abs(block).sum())


def game_batch(preds: Sequence[DensityMap], gts: Sequence[DensityMap], level: int) -> float:
    """Average of per-frame GAME over a batch."""
    if len(preds) != len(gts) or not preds:
        raise ValidationError("GAME batch needs equally long, nonempty lists of maps")
    return float(np.mean([game(p, g, level) for p, g in zip(preds, gts)]))


# ---------------------------------------------------------------------------
# training losses, used here as evaluation functions


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 100.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("loss weights must be >= 0")


def loss_density(d: float, dhat: float) -> float:
    return float((d - dhat) ** 2)


def _distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
        raise ValidationError("a count-class distribution must be a nonempty vector of probabilities summing to 1")
    return p


def loss_aux(p, phat) -> float:
    """Categorical cross entropy of predicted class probabilities ``phat``."""
    p = _distribution(p)
    phat = _distribution(phat)
    if p.shape != phat.shape:
        raise ValidationError(f"class distributions differ in length: {p.size} vs {phat.size}")
    support = p > 0
    if np.any(phat[support] <= 0):
        raise InfiniteLossError("predicted probability is 0 on a class with positive true probability")
    return float(-(p[support] * np.log(phat[support])).sum())


def loss_combined(d: float, dhat: float, p, phat, cfg: LossConfig = LossConfig()) -> float:
    return cfg.lambda1 * loss_density(d, dhat) + cfg.lambda2 * loss_aux(p, phat)


def loss_pixel_count(pred: DensityMap, gt: DensityMap) -> dict:
    """Pixel-wise squared error and squared count difference over a whole patch."""
    _check_same_shape(pred, gt)
    diff = gt.values - pred.values
    return {"pixel": float((diff**2).sum()), "count": float((gt.values.sum() - pred.values.sum()) ** 2)}


# ---------------------------------------------------------------------------
# per-pixel reproduction


def scatter_stats(pred: DensityMap, gt: DensityMap) -> dict:
    """Pearson correlation and least-squares fit ``pred ~ slope * gt + intercept`` over ROI cells."""
    _check_same_shape(pred, gt)
    mask = _roi_inside(pred, gt)
    if mask.sum() < 2:
        raise ValidationError("scatter statistics need at least 2 ROI cells")
    x = gt.values[mask]
    y = pred.values[mask]
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    if sxx <= 0:
        raise DegenerateInputError("ground-truth density has zero variance over the ROI")
    sxy = float(xc @ yc)
    syy = float(yc @ yc)
    slope = sxy / sxx
    pearson = sxy / math.sqrt(sxx * syy) if syy > 0 else 0.0
    return {"pearson": pearson, "slope": slope, "intercept": float(y.mean() - slope * x.mean())}


# ---------------------------------------------------------------------------
# compactness and localization


@dataclass(frozen=True, eq=False)
class BoxSpec:
    """Annotation box of ``base_width`` x ``base_height`` pixels at ``reference_scale``.

    With a perspective map the box is scaled by ``perspective / reference_scale``
    at the annotated point.
    """

    base_width: float
    base_height: float
    perspective: PerspectiveMap | None = None
    reference_scale: float = 1.0

    def __post_init__(self):
        if not (self.base_width > 0 and self.base_height > 0):
            raise ValidationError("box dimensions must be > 0")
        if not self.reference_scale > 0:
            raise ValidationError("reference_scale must be > 0")

    def half_extent(self, point) -> tuple[float, float]:
        s = 1.0 if self.perspective is None else self.perspective.at(point) / self.reference_scale
        return 0.5 * self.base_width * s, 0.5 * self.base_height * s


def box_slices(point, box: BoxSpec, shape: tuple[int, int]) -> tuple[slice, slice]:
    """Cells whose centers lie in the closed box around ``point``, clipped to the frame."""
    hw, hh = box.half_extent(point)
    x, y = float(point[0]), float(point[1])
    c0 = max(math.ceil(x - hw - 0.5), 0)
    c1 = min(math.floor(x + hw - 0.5), shape[1] - 1)
    r0 = max(math.ceil(y - hh - 0.5), 0)
    r1 = min(math.floor(y + hh - 0.5), shape[0] - 1)
    return slice(r0, max(r1 + 1, r0)), slice(c0, max(c1 + 1, c0))


def boxes_mask(points, box: BoxSpec, shape: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for p in as_points(points):
        rs, cs = box_slices(p, box, shape)
        mask[rs, cs] = True
    return mask


def bbdr(dmap: DensityMap, points, box: BoxSpec) -> float:
    """Fraction of the (clamped) density lying inside the union of annotation boxes."""
    dens = dmap.clamped()
    total = float(dens.sum())
    if total <= 0:
        raise DegenerateInputError("bounding box density ratio is undefined for a map with no positive density")
    pts = as_points(points)
    if len(pts) == 0:
        return 0.0
    inside = float(dens[boxes_mask(pts, box, dens.shape)].sum())
    return min(inside / total, 1.0)


def bbmae(pred: DensityMap, gt: DensityMap, points, box: BoxSpec) -> float:
    """Mean over annotation boxes of ``|sum_box(pred) - sum_box(gt)|``."""
    _check_same_shape(pred, gt)
    pts = as_points(points)
    if len(pts) == 0:
        raise ValidationError("bounding box MAE needs at least one annotation")
    diff = pred.values - gt.values
    errs = [abs(float(diff[box_slices(p, box, diff.shape)].sum())) for p in pts]
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# temporal smoothness


def temporal_mad(seq: Sequence[DensityMap]) -> float:
    """Mean over consecutive frame pairs of the mean absolute per-cell difference."""
    if len(seq) < 2:
        raise ValidationError("temporal MAD needs at least 2 frames")
    shape = seq[0].shape
    if any(m.shape != shape for m in seq):
        raise ValidationError("all maps in a sequence must share one shape")
    mask = _roi_inside(*seq)
    if not mask.any():
        raise ValidationError("ROI has no inside cells")
    diffs = [float(np.abs(a.values[mask] - b.values[mask]).mean()) for a, b in zip(seq, seq[1:])]
    return float(np.mean(diffs))


# ---------------------------------------------------------------------------
# detection matching


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_detections: tuple[int, ...]
    unmatched_gt: tuple[int, ...]
    matching_distance: float
    n_detections: int = 0
    n_gt: int = 0

    @property
    def true_positives(self) -> int:
        return len(self.pairs)

    @property
    def total_distance(self) -> float:
        return float(sum(d for _, _, d in self.pairs))


def match_detections(detections, gt_points, matching_distance: float) -> MatchResult:
    """Pair detections with ground truth one-to-one within ``matching_distance``.

    Maximizes the number of pairs first, then minimizes their total distance.
    ``detections`` may be a DetectionSet or any point sequence.
    """
    if not matching_distance > 0:
        raise ValidationError(f"matching distance must be > 0, got {matching_distance}")
    det = as_points(getattr(detections, "points", detections))
    gt = as_points(gt_points)
    n, m = len(det), len(gt)
    pairs: list[tuple[int, int, float]] = []
    if n and m:
        dist = np.hypot(det[:, None, 0] - gt[None, :, 0], det[:, None, 1] - gt[None, :, 1])
        allowed = dist <= matching_distance
        if allowed.any():
            # every allowed edge is worth more than the sum of all distances it could trade against
            bonus = matching_distance * (min(n, m) + 1) + 1.0
            cost = np.where(allowed, dist - bonus, 0.0)
            rows, cols = linear_sum_assignment(cost)
            for r, c in zip(rows, cols):
                if allowed[r, c]:
                    pairs.append((int(r), int(c), float(dist[r, c])))
    pairs.sort()
    used_d = {p[0] for p in pairs}
    used_g = {p[1] for p in pairs}
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_detections=tuple(i for i in range(n) if i not in used_d),
        unmatched_gt=tuple(j for j in range(m) if j not in used_g),
        matching_distance=float(matching_distance),
        n_detections=n,
        n_gt=m,
    )


def prf(match: MatchResult, n_dets: int | None = None, n_gt: int | None = None) -> dict:
    """Precision, recall and F1; each ratio with a zero denominator is 0."""
    n_dets = match.n_detections if n_dets is None else n_dets
    n_gt = match.n_gt if n_gt is None else n_gt
    tp = match.true_positives
    if tp > min(n_dets, n_gt):
        raise ValidationError(f"{tp} matches cannot come from {n_dets} detections and {n_gt} ground truths")
    precision = tp / n_dets if n_dets else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def trajectory_errors(matches: Sequence[MatchResult], detections: Sequence, gt_points: Sequence, gt_track_ids: Sequence) -> dict:
    """Error distance (ED), error-difference distance (EDD) and miss rate over a sequence.

    All arguments are per-frame lists in temporal order. The error vector
    of a matched pair is ``detection - ground truth``; EDD compares error
    vectors of the same track in consecutive frames.
    """
    if not (len(matches) == len(detections) == len(gt_points) == len(gt_track_ids)):
        raise ValidationError("per-frame inputs must all have the same length")
    if any(ids is None for ids in gt_track_ids):
        raise ValidationError("trajectory errors need track ids on every ground-truth frame")
    eds: list[float] = []
    edds: list[float] = []
    total_gt = 0
    missed = 0
    prev: dict[int, np.ndarray] = {}
    for match, det, gt, ids in zip(matches, detections, gt_points, gt_track_ids):
        det = as_points(getattr(det, "points", det))
        gt = as_points(gt)
        if len(ids) != len(gt):
            raise ValidationError("track ids and ground-truth points differ in length")
        total_gt += len(gt)
        missed += len(gt) - match.true_positives
        cur: dict[int, np.ndarray] = {}
        for di, gi, _ in match.pairs:
            e = det[di] - gt[gi]
            eds.append(float(np.hypot(e[0], e[1])))
            tid = int(ids[gi])
            cur[tid] = e
            if tid in prev:
                d = e - prev[tid]
                edds.append(float(np.hypot(d[0], d[1])))
        prev = cur

    def stats(v):
        return (float(np.mean(v)), float(np.std(v))) if v else (math.nan, math.nan)

    ed_mean, ed_std = stats(eds)
    edd_mean, edd_std = stats(edds)
    return {
        "ed_mean": ed_mean,
        "ed_std": ed_std,
        "edd_mean": edd_mean,
        "edd_std": edd_std,
        "miss_rate": missed / total_gt if total_gt else 0.0,
    }


# ---------------------------------------------------------------------------
# tracking


def tracking_precision_curve(errors: Sequence[float], thresholds: Sequence[float]) -> list[tuple[float, float]]:
    """Fraction of frames whose tracking error is at most each threshold."""
    err = np.asarray(errors, dtype=np.float64)
    if err.size == 0:
        raise ValidationError("precision curve needs at least one frame")
    return [(float(t), float(np.mean(err <= t))) for t in thresholds]


def points_in_roi(points, roi) -> np.ndarray:
    """Subset of ``points`` whose cells are inside ``roi`` (all points when ``roi`` is None)."""
    pts = as_points(points)
    if roi is None or len(pts) == 0:
        return pts
    return pts[roi.contains(pts)]

