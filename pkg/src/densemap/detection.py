"""Object locations recovered from density maps.

Five detectors share one front end: the map is optionally Gaussian
presmoothed, negatives and out-of-ROI cells are zeroed, and the target
object count is ``round(sum over ROI)`` of the raw map. Ties are always
broken towards the lowest ``(row, col)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from .core import DensityMap, as_points
from .errors import CapacityError, DegenerateInputError, ValidationError
from .synthesis import peak_density

LOCAL_MAX = "local-max"
KMEANS = "kmeans"
GMM = "gmm"
GMM_WEIGHTED = "gmm-weighted"
INTPROG = "intprog"
METHODS = (LOCAL_MAX, KMEANS, GMM, GMM_WEIGHTED, INTPROG)

DEFAULT_SIGMA = 4.0
# presets for noisy (estimated) maps: presmoothing, local-max using the wider
# kernel, and a segmentation threshold relative to the synthesis peak
NOISY_TAU_FRACTION = 0.1
NOISY_PRESMOOTH = {LOCAL_MAX: 3.0, KMEANS: 2.0, GMM: 2.0, GMM_WEIGHTED: 2.0, INTPROG: 2.0}
COVARIANCE_FLOOR = 0.25
DEFAULT_NMS_RADIUS = 6.0  # 1.5 sigma: border-renormalized kernels have tall flanks
DEFAULT_QUANTIZATION = 10000
GREEDY_STARTS = 8
EXACT_MAX_CANDIDATES = 25
EXACT_MAX_OBJECTS = 4


def default_tau(sigma: float = DEFAULT_SIGMA) -> float:
    return 1e-3 * peak_density(sigma)


def default_window(sigma: float = DEFAULT_SIGMA) -> int:
    """Odd window about 1.5 sigma wide (7 cells at sigma 4).

    Narrow windows keep neighbouring objects in separate windows; much
    wider ones let the count fit slide units between nearby objects.
    """
    return 2 * int(math.floor(0.75 * sigma + 0.5)) + 1


@dataclass(frozen=True, eq=False)
class DetectionSet:
    frame_id: int
    points: np.ndarray
    method: str
    source_count: float

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown detection method {self.method!r}")
        pts = as_points(self.points)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class Segment:
    cells: np.ndarray  # flat (row-major) cell indices, ascending
    mass: float


@dataclass(frozen=True, eq=False)
class GmmParams:
    means: np.ndarray  # (K, 2) as (x, y)
    covariances: np.ndarray  # (K, 2, 2)
    mixing: np.ndarray  # (K,)
    log_likelihood: float
    n_iter: int

    @property
    def K(self) -> int:
        return len(self.means)


@dataclass(frozen=True, eq=False)
class GridCounts:
    window: int
    stride: int
    counts: np.ndarray  # (n_window_rows, n_window_cols)
    row_offsets: np.ndarray
    col_offsets: np.ndarray


@dataclass(frozen=True)
class IntProgConfig:
    window: int | None = None  # None: default_window(DEFAULT_SIGMA)
    stride: int = 1
    candidate_stride: int = 1
    solver: str = "greedy"
    norm: str = "l1"

    def resolved_window(self) -> int:
        return default_window() if self.window is None else self.window


# ---------------------------------------------------------------------------
# shared front end


def _round_count(x: float) -> int:
    return int(math.floor(x + 0.5))


def prepare(dmap: DensityMap, presmooth_sigma: float = 0.0) -> tuple[np.ndarray, int, float]:
    """Return ``(working density, target count, raw ROI sum)``."""
    if presmooth_sigma < 0:
        raise ValidationError(f"presmooth sigma must be >= 0, got {presmooth_sigma}")
    total = dmap.total()
    values = dmap.values
    if presmooth_sigma > 0:
        values = ndimage.gaussian_filter(values, presmooth_sigma, mode="reflect", truncate=4.0)
    work = np.maximum(values, 0.0)
    if dmap.roi is not None:
        work = np.where(dmap.roi.inside, work, 0.0)
    return work, _round_count(total), total


def _centers(flat: np.ndarray, width: int) -> np.ndarray:
    rows, cols = np.divmod(flat, width)
    return np.column_stack([cols + 0.5, rows + 0.5]).astype(np.float64)


def _segments_of(work: np.ndarray, tau: float) -> list[Segment]:
    labels, n = ndimage.label(work > tau)
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
    vals = work.ravel()
    segs = []
    for k in range(n):
        cells = order[bounds[k] : bounds[k + 1]]
        segs.append(Segment(cells, float(vals[cells].sum())))
    return segs


def threshold_segments(dmap: DensityMap, tau: float | None = None, presmooth_sigma: float = 0.0) -> list[Segment]:
    """4-connected components of ROI cells whose clamped density exceeds ``tau``.

    Segments are ordered by their first cell in raster order.
    """
    tau = default_tau() if tau is None else tau
    if tau < 0:
        raise ValidationError(f"threshold must be >= 0, got {tau}")
    work, _, _ = prepare(dmap, presmooth_sigma)
    return _segments_of(work, tau)


def allocate_counts(masses: Sequence[float], sizes: Sequence[int], target: int) -> list[int]:
    """Per-segment object counts ``round(mass)``, adjusted so they sum to ``target``.

    Adjustments go to the segments whose rounding residual is largest in the
    needed direction; a segment never gets more objects than it has cells.
    """
    masses = np.asarray(masses, dtype=np.float64)
    k = np.minimum(np.floor(masses + 0.5).astype(int), np.asarray(sizes, dtype=int))
    while k.sum() < target:
        room = k < np.asarray(sizes)
        if not room.any():
            break
        resid = np.where(room, masses - k, -np.inf)
        k[int(np.argmax(resid))] += 1
    while k.sum() > target:
        resid = np.where(k > 0, k - masses, -np.inf)
        k[int(np.argmax(resid))] -= 1
    return k.tolist()


# ---------------------------------------------------------------------------
# local maxima with non-maximum suppression


def detect_local_max(
    dmap: DensityMap, nms_radius: float = DEFAULT_NMS_RADIUS, presmooth_sigma: float = 0.0, frame_id: int = 0
) -> DetectionSet:
    """Greedy peak picking: take the highest cell, suppress a disk, repeat until the count is reached."""
    if not nms_radius > 0:
        raise ValidationError(f"NMS radius must be > 0, got {nms_radius}")
    work, target, total = prepare(dmap, presmooth_sigma)
    h, w = work.shape
    flat = work.ravel()
    order = np.argsort(-flat, kind="stable")
    r = int(math.floor(nms_radius))
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    disk = dx**2 + dy**2 <= nms_radius**2
    dy, dx = dy[disk], dx[disk]
    suppressed = np.zeros((h, w), dtype=bool)
    picks = []
    for idx in order:
        if len(picks) >= target or flat[idx] <= 0:
            break
        row, col = divmod(int(idx), w)
        if suppressed[row, col]:
            continue
        picks.append(idx)
        rr, cc = row + dy, col + dx
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        suppressed[rr[ok], cc[ok]] = True
    return DetectionSet(frame_id, _centers(np.asarray(picks, dtype=np.intp), w), LOCAL_MAX, total)


# ---------------------------------------------------------------------------
# clustering


def farthest_point_init(points: np.ndarray, K: int, rng: np.random.Generator, weights=None) -> np.ndarray:
    """Seeded first pick, then repeatedly the point farthest from those chosen.

    With ``weights`` the first pick is drawn proportionally to weight and
    distances are scaled by weight, so heavy samples are preferred.
    """
    if weights is None:
        w = np.ones(len(points))
        chosen = [int(rng.integers(len(points)))]
    else:
        w = np.asarray(weights, dtype=np.float64)
        chosen = [int(rng.choice(len(points), p=w / w.sum()))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(1)
    for _ in range(1, K):
        nxt = int(np.argmax(w * d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(1))
    return points[chosen].copy()


def kmeans(points, K: int, seed=0, weights=None, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm from farthest-point seeds; stops at an assignment fixpoint."""
    pts = as_points(points)
    if K < 1 or K > len(pts):
        raise ValidationError(f"cannot place {K} centers on {len(pts)} points")
    wts = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=np.float64)
    centers = farthest_point_init(pts, K, np.random.default_rng(seed))
    assign = None
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(2)
        new = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(K):
            sel = assign == k
            if sel.any():
                centers[k] = np.average(pts[sel], axis=0, weights=wts[sel])
    return centers


def _gauss_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    a, b, d = cov[0, 0], cov[0, 1], cov[1, 1]
    det = a * d - b * b
    dx = x[:, 0] - mean[0]
    dy = x[:, 1] - mean[1]
    maha = (d * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
    return -0.5 * maha - 0.5 * math.log(det) - math.log(2 * math.pi)


def _floor_cov(cov: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= floor:
        return cov
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def fit_gmm(
    samples,
    sample_weights=None,
    K: int = 1,
    seed: int = 0,
    init_means=None,
    init_std: float = 2.0,
    tol: float = 1e-6,
    max_iter: int = 200,
    cov_floor: float = COVARIANCE_FLOOR,
) -> GmmParams:
    """EM for a 2D Gaussian mixture on integer-weighted samples.

    A weight of ``n`` counts the sample ``n`` times; the weighted sufficient
    statistics give exactly the EM of the replicated sample set.
    Iteration stops once the log-likelihood per unit weight gains less
    than ``tol``.
    """
    x = as_points(samples)
    w = np.ones(len(x)) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (len(x),):
        raise ValidationError("one weight per sample is required")
    if np.any(w <= 0) or np.any(w != np.round(w)):
        raise ValidationError("sample weights must be positive integers")
    if K < 1 or w.sum() < K:
        raise ValidationError(f"K={K} needs 1 <= K <= total weight {w.sum():g}")
    distinct = len(np.unique(x, axis=0))
    if K > distinct:
        raise ValidationError(f"K={K} exceeds the {distinct} distinct sample locations")
    if init_means is None:
        uniq, inverse = np.unique(x, axis=0, return_inverse=True)
        uniq_w = np.bincount(inverse.ravel(), weights=w)
        means = farthest_point_init(uniq, K, np.random.default_rng(seed), uniq_w)
    else:
        means = as_points(init_means).copy()
        if len(means) != K:
            raise ValidationError("init_means must have K rows")
    covs = np.repeat((init_std**2 * np.eye(2))[None], K, axis=0)
    mixing = np.full(K, 1.0 / K)
    total_w = w.sum()

    prev_ll = -np.inf
    ll = -np.inf
    it = 0
    for it in range(max_iter + 1):
        log_r = np.column_stack([np.log(mixing[k]) + _gauss_logpdf(x, means[k], covs[k]) for k in range(K)])
        log_norm = logsumexp(log_r, axis=1)
        ll = float(w @ log_norm)
        if (ll - prev_ll) / total_w < tol or it == max_iter:
            break
        prev_ll = ll
        resp = np.exp(log_r - log_norm[:, None]) * w[:, None]
        nk = resp.sum(0)
        for k in range(K):
            if nk[k] <= 1e-12 * total_w:
                continue  # dead component keeps its parameters
            means[k] = resp[:, k] @ x / nk[k]
            diff = x - means[k]
            cov = (diff * resp[:, k, None]).T @ diff / nk[k]
            covs[k] = _floor_cov(0.5 * (cov + cov.T), cov_floor)
        nk = np.maximum(nk, 1e-12 * total_w)
        mixing = nk / nk.sum()
    return GmmParams(means.copy(), covs.copy(), mixing.copy(), ll, it)


def _segment_plan(dmap: DensityMap, tau, presmooth_sigma):
    tau = default_tau() if tau is None else tau
    if tau < 0:
        raise ValidationError(f"threshold must be >= 0, got {tau}")
    work, target, total = prepare(dmap, presmooth_sigma)
    if target < 0:
        raise DegenerateInputError(f"density sums to {total:g}, a negative object count")
    segs = _segments_of(work, tau)
    if target > 0 and not segs:
        raise DegenerateInputError(f"density sums to {total:g} but no cell exceeds the threshold {tau:g}")
    ks = allocate_counts([s.mass for s in segs], [len(s.cells) for s in segs], target)
    return work, segs, ks, total


def _snap_to_segment(means: np.ndarray, seg: Segment, width: int) -> np.ndarray:
    """Move any mean whose cell falls outside the segment to the nearest segment cell center.

    Cluster means of a non-convex segment can leave it (and so the ROI).
    """
    means = np.array(means, dtype=np.float64)
    cells = np.floor(means[:, 1]).astype(np.intp) * width + np.floor(means[:, 0]).astype(np.intp)
    outside = ~np.isin(cells, seg.cells)
    if np.any(outside):
        pts = _centers(seg.cells, width)
        for i in np.flatnonzero(outside):
            j = int(np.argmin(((pts - means[i]) ** 2).sum(axis=1)))
            means[i] = pts[j]
    return means


def detect_kmeans(
    dmap: DensityMap, tau: float | None = None, seed: int = 0, presmooth_sigma: float = 0.0, frame_id: int = 0
) -> DetectionSet:
    """k-means on the unweighted cell centers of each thresholded segment."""
    work, segs, ks, total = _segment_plan(dmap, tau, presmooth_sigma)
    out = []
    for i, (seg, k) in enumerate(zip(segs, ks)):
        if k:
            centers = kmeans(_centers(seg.cells, work.shape[1]), k, seed=(seed, i))
            out.append(_snap_to_segment(centers, seg, work.shape[1]))
    pts = np.vstack(out) if out else np.zeros((0, 2))
    return DetectionSet(frame_id, pts, KMEANS, total)


def detect_gmm(
    dmap: DensityMap,
    tau: float | None = None,
    weighted: bool = True,
    quantization: int = DEFAULT_QUANTIZATION,
    seed: int = 0,
    presmooth_sigma: float = 0.0,
    init_std: float = 2.0,
    frame_id: int = 0,
) -> DetectionSet:
    """GMM clustering per segment; weighted mode replicates cells by quantized density."""
    if quantization < 1:
        raise ValidationError(f"quantization must be >= 1, got {quantization}")
    work, segs, ks, total = _segment_plan(dmap, tau, presmooth_sigma)
    vals = work.ravel()
    out = []
    for i, (seg, k) in enumerate(zip(segs, ks)):
        if not k:
            continue
        if weighted:
            wts = np.maximum(1, np.rint(vals[seg.cells] * quantization))
        else:
            wts = np.ones(len(seg.cells))
        params = fit_gmm(
            _centers(seg.cells, work.shape[1]), wts, k, seed=(seed, i), init_std=init_std
        )
        out.append(_snap_to_segment(params.means, seg, work.shape[1]))
    pts = np.vstack(out) if out else np.zeros((0, 2))
    return DetectionSet(frame_id, pts, GMM_WEIGHTED if weighted else GMM, total)


# ---------------------------------------------------------------------------
# integer programming on sliding-window counts


def _offsets(n: int, window: int, stride: int) -> np.ndarray:
    """Offsets ``i * stride`` (``i`` may be negative) of every window intersecting ``range(n)``."""
    first = -((window - 1) // stride)
    last = (n - 1) // stride
    return np.arange(first, last + 1) * stride


def _membership(n: int, offsets: np.ndarray, window: int) -> np.ndarray:
    """0/1 matrix ``M[i, p] = 1`` iff position ``p`` lies in window ``i``."""
    p = np.arange(n)
    return ((p[None, :] >= offsets[:, None]) & (p[None, :] < offsets[:, None] + window)).astype(np.float64)


def window_counts(dmap: DensityMap, window: int, stride: int, presmooth_sigma: float = 0.0) -> GridCounts:
    """Clamped density summed over ``window`` x ``window`` boxes placed every ``stride`` cells.

    Every box on the stride lattice that intersects the frame is kept and
    cropped to it, so each cell is covered by the same number of boxes when
    ``stride`` divides ``window``.
    """
    if window < 1 or not 1 <= stride <= window:
        raise ValidationError(f"need window >= 1 and 1 <= stride <= window, got {window}, {stride}")
    work, _, _ = prepare(dmap, presmooth_sigma)
    ro = _offsets(work.shape[0], window, stride)
    co = _offsets(work.shape[1], window, stride)
    counts = _membership(work.shape[0], ro, window) @ work @ _membership(work.shape[1], co, window).T
    return GridCounts(window, stride, counts, ro, co)


@dataclass(frozen=True, eq=False)
class IntProgSolution:
    occupancy: np.ndarray  # (H, W) non-negative integers
    objective: float
    candidates: np.ndarray  # flat indices of candidate cells


class _WindowModel:
    """Residual bookkeeping for ``A x - c`` with A factored into row and column memberships."""

    def __init__(self, shape, window, stride, counts, norm="l1"):
        h, w = shape
        self.R = _membership(h, _offsets(h, window, stride), window)
        self.C = _membership(w, _offsets(w, window, stride), window)
        self.counts = counts
        self.cost = np.abs if norm == "l1" else np.square

    def residual(self, occ):
        return self.R @ occ @ self.C.T - self.counts

    def objective(self, res) -> float:
        return float(self.cost(res).sum())

    def add_delta(self, res, sign=1.0):
        """Objective change for adding ``sign`` units at every cell."""
        g = self.cost(res + sign) - self.cost(res)
        return self.R.T @ g @ self.C

    def apply(self, res, row, col, sign=1.0):
        return res + sign * np.outer(self.R[:, row], self.C[:, col])


def _candidate_cells(shape, candidate_stride, roi) -> np.ndarray:
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    mask[::candidate_stride, ::candidate_stride] = True
    if roi is not None:
        mask &= roi.inside
    return np.flatnonzero(mask)


def _greedy(model: _WindowModel, shape, cand: np.ndarray, n: int, refine: bool = True, starts: int = GREEDY_STARTS):
    """Best of several greedy runs, each forcing a different first unit.

    The forced first cells are the ``starts`` best single-unit placements.
    """
    if n == 0:
        return _greedy_run(model, shape, cand, n, refine)
    res0 = model.residual(np.zeros(shape))
    order = np.argsort(model.add_delta(res0).ravel()[cand], kind="stable")
    best = None
    for j in order[: max(1, starts)]:
        occ, obj = _greedy_run(model, shape, cand, n, refine, first=int(cand[j]))
        if best is None or obj < best[1] - 1e-12:
            best = (occ, obj)
    return best


def _greedy_run(model: _WindowModel, shape, cand: np.ndarray, n: int, refine: bool = True, first=None):
    h, w = shape
    occ = np.zeros(shape)
    res = model.residual(occ)
    for k in range(n):
        delta = model.add_delta(res).ravel()[cand]
        q = int(cand[int(np.argmin(delta))]) if k or first is None else first
        r, c = divmod(q, w)
        occ[r, c] += 1
        res = model.apply(res, r, c)
    improved = refine and n > 0
    while improved:
        improved = False
        for q in np.flatnonzero(occ.ravel()):
            r, c = divmod(int(q), w)
            if occ[r, c] == 0:
                continue
            base = model.objective(res)
            res_out = model.apply(res, r, c, -1.0)
            removed = model.objective(res_out)
            delta = model.add_delta(res_out).ravel()[cand]
            j = int(np.argmin(delta))
            if removed + delta[j] < base - 1e-12:
                q2 = int(cand[j])
                r2, c2 = divmod(q2, w)
                occ[r, c] -= 1
                occ[r2, c2] += 1
                res = model.apply(res_out, r2, c2)
                improved = True
    if refine and n > 1:
        occ, res = _pair_refine(model, shape, cand, occ, res)
    return occ, model.objective(res)


def _pair_refine(model: _WindowModel, shape, cand: np.ndarray, occ, res, max_rounds: int = 5):
    """Jointly relocate pairs of nearby units within a local box.

    Single-unit moves cannot split two units stacked between two objects,
    since moving either one alone worsens the fit. Here both units are
    lifted and re-placed: every cell of the box for the first, the best
    cell for the second.
    """
    h, w = shape
    reach = int(model.R.sum(axis=1).max())  # window size
    allowed = np.zeros(h * w, dtype=bool)
    allowed[cand] = True
    allowed = allowed.reshape(shape)
    for _ in range(max_rounds):
        moved = False
        units = np.repeat(np.flatnonzero(occ.ravel()), occ.ravel()[occ.ravel() > 0].astype(int))
        rc = np.column_stack(np.divmod(units, w))
        for i in range(len(rc)):
            for j in range(i + 1, len(rc)):
                (ra, ca), (rb, cb) = rc[i], rc[j]
                if occ[ra, ca] == 0 or occ[rb, cb] == 0 or max(abs(ra - rb), abs(ca - cb)) > 2 * reach:
                    continue
                if ra == rb and ca == cb and occ[ra, ca] < 2:
                    continue
                r0, r1 = max(min(ra, rb) - reach, 0), min(max(ra, rb) + reach + 1, h)
                c0, c1 = max(min(ca, cb) - reach, 0), min(max(ca, cb) + reach + 1, w)
                base = model.objective(res)
                lifted = model.apply(model.apply(res, ra, ca, -1.0), rb, cb, -1.0)
                # windows touching the box; only these change
                wr = np.flatnonzero(model.R[:, r0:r1].any(axis=1))
                wc = np.flatnonzero(model.C[:, c0:c1].any(axis=1))
                Rl = model.R[np.ix_(wr, np.arange(r0, r1))]
                Cl = model.C[np.ix_(wc, np.arange(c0, c1))]
                local = lifted[np.ix_(wr, wc)]
                outside = model.objective(lifted) - model.objective(local)
                ok = allowed[r0:r1, c0:c1]
                best = (base - 1e-9, None)
                for pr, pc in zip(*np.nonzero(ok)):
                    one = local + np.outer(Rl[:, pr], Cl[:, pc])
                    g = model.cost(one + 1.0) - model.cost(one)
                    d2 = Rl.T @ g @ Cl
                    d2[~ok] = np.inf
                    k = int(np.argmin(d2))
                    total = outside + model.objective(one) + d2.flat[k]
                    if total < best[0]:
                        best = (total, (pr + r0, pc + c0, k // (c1 - c0) + r0, k % (c1 - c0) + c0))
                if best[1] is not None:
                    p1r, p1c, p2r, p2c = best[1]
                    occ[ra, ca] -= 1
                    occ[rb, cb] -= 1
                    occ[p1r, p1c] += 1
                    occ[p2r, p2c] += 1
                    res = model.apply(model.apply(lifted, p1r, p1c), p2r, p2c)
                    rc[i], rc[j] = (p1r, p1c), (p2r, p2c)
                    moved = True
        if not moved:
            break
    return occ, res


def _exact(model: _WindowModel, shape, cand: np.ndarray, n: int):
    """Depth-first branch and bound over occupancy vectors summing to ``n``."""
    h, w = shape
    cols = []
    for q in cand:
        r, c = divmod(int(q), w)
        cols.append(np.outer(model.R[:, r], model.C[:, c]).ravel())
    A = np.column_stack(cols) if cols else np.zeros((model.counts.size, 0))
    base = -model.counts.ravel()
    m = len(cand)
    # windows still reachable by candidates i..m-1
    reach = np.zeros((m + 1, A.shape[0]), dtype=bool)
    for i in range(m - 1, -1, -1):
        reach[i] = reach[i + 1] | (A[:, i] > 0)

    best = [math.inf, None]
    x = np.zeros(m, dtype=int)

    def bound(res, i, left):
        # a window can only gain units, at most ``left`` more of them
        fixed = ~reach[i]
        lb = model.cost(res[fixed]).sum()
        open_ = res[~fixed]
        lb += model.cost(np.where(open_ >= 0, open_, np.minimum(open_ + left, 0.0))).sum()
        return lb

    def dfs(i, left, res):
        if left == 0:
            obj = model.objective(res)
            if obj < best[0] - 1e-12:
                best[0], best[1] = obj, x.copy()
            return
        if i == m:
            return
        if bound(res, i, left) >= best[0] - 1e-12:
            return
        for k in range(left, -1, -1):
            x[i] = k
            dfs(i + 1, left - k, res + k * A[:, i])
        x[i] = 0

    dfs(0, n, base)
    occ = np.zeros(h * w)
    if best[1] is not None:
        occ[cand] = best[1]
    return occ.reshape(shape), float(best[0])


def solve_intprog(
    dmap: DensityMap, cfg: IntProgConfig = IntProgConfig(), presmooth_sigma: float = 0.0
) -> IntProgSolution:
    """Integer occupancy minimizing the L1 misfit of window counts, with the total count fixed."""
    window = cfg.resolved_window()
    if cfg.candidate_stride < 1:
        raise ValidationError(f"candidate stride must be >= 1, got {cfg.candidate_stride}")
    if cfg.solver not in ("greedy", "exact"):
        raise ValidationError(f"solver must be 'greedy' or 'exact', got {cfg.solver!r}")
    if cfg.norm not in ("l1", "l2"):
        raise ValidationError(f"norm must be 'l1' or 'l2', got {cfg.norm!r}")
    grid = window_counts(dmap, window, cfg.stride, presmooth_sigma)
    _, n, total = prepare(dmap, presmooth_sigma)
    if n < 0:
        raise DegenerateInputError(f"density sums to {total:g}, a negative object count")
    model = _WindowModel(dmap.shape, window, cfg.stride, grid.counts, cfg.norm)
    cand = _candidate_cells(dmap.shape, cfg.candidate_stride, dmap.roi)
    if n > 0 and len(cand) == 0:
        raise DegenerateInputError("no candidate cells inside the ROI")
    if cfg.solver == "exact":
        if len(cand) > EXACT_MAX_CANDIDATES or n > EXACT_MAX_OBJECTS:
            raise CapacityError(
                f"exact solver handles <= {EXACT_MAX_CANDIDATES} candidates and <= {EXACT_MAX_OBJECTS} objects, "
                f"got {len(cand)} and {n}"
            )
        occ, obj = _exact(model, dmap.shape, cand, n)
    else:
        occ, obj = _greedy(model, dmap.shape, cand, n)
    return IntProgSolution(occ.astype(int), obj, cand)


def detect_intprog(
    dmap: DensityMap, cfg: IntProgConfig = IntProgConfig(), presmooth_sigma: float = 0.0, frame_id: int = 0
) -> DetectionSet:
    sol = solve_intprog(dmap, cfg, presmooth_sigma)
    flat = np.flatnonzero(sol.occupancy.ravel())
    reps = sol.occupancy.ravel()[flat]
    pts = _centers(np.repeat(flat, reps), dmap.width)
    return DetectionSet(frame_id, pts, INTPROG, dmap.total())


def detect(dmap: DensityMap, method: str, frame_id: int = 0, **options) -> DetectionSet:
    """Dispatch to one of the five detectors by name."""
    if method == LOCAL_MAX:
        return detect_local_max(dmap, frame_id=frame_id, **options)
    if method == KMEANS:
        return detect_kmeans(dmap, frame_id=frame_id, **options)
    if method in (GMM, GMM_WEIGHTED):
        return detect_gmm(dmap, weighted=method == GMM_WEIGHTED, frame_id=frame_id, **options)
    if method == INTPROG:
        return detect_intprog(dmap, frame_id=frame_id, **options)
    raise ValidationError(f"unknown detection method {method!r}; choose from {', '.join(METHODS)}")
