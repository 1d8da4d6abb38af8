import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from densemap.core import DensityMap, PerspectiveMap, RoiMask
from densemap.errors import DegenerateInputError, InfiniteLossError, ValidationError
from densemap.metrics import (
    BoxSpec,
    LossConfig,
    bbdr,
    bbmae,
    count_errors,
    game,
    game_batch,
    loss_aux,
    loss_combined,
    loss_density,
    loss_pixel_count,
    match_detections,
    points_in_roi,
    prf,
    scatter_stats,
    temporal_mad,
    tracking_precision_curve,
    trajectory_errors,
)
from densemap.synthesis import SynthesisConfig, synthesize_points


def P(v):
    return DensityMap(np.asarray(v, dtype=float), is_prediction=True)


def test_count_errors():
    assert count_errors([1, 2], [1, 2]) == {"mae": 0.0, "mse": 0.0}
    assert count_errors([2], [0]) == {"mae": 2.0, "mse": 4.0}
    assert count_errors([1, 3], [0, 0]) == {"mae": 2.0, "mse": 5.0}
    with pytest.raises(ValidationError):
        count_errors([], [])
    with pytest.raises(ValidationError):
        count_errors([1], [1, 2])


def test_game_hand_example():
    gt = P(np.zeros((2, 2)))
    pred = P([[1, -1], [0, 0]])
    assert game(pred, gt, 0) == 0.0
    assert game(pred, gt, 1) == 2.0
    assert game(gt, gt, 3) == 0.0


def test_game_odd_sizes_against_loop():
    rng = np.random.default_rng(0)
    a, b = P(rng.normal(size=(7, 5))), P(rng.normal(size=(7, 5)))
    d = a.values - b.values
    # level 1 halves with the odd remainder in the later part
    expect = sum(abs(d[rs, cs].sum()) for rs in (slice(0, 3), slice(3, 7)) for cs in (slice(0, 2), slice(2, 5)))
    assert game(a, b, 1) == pytest.approx(expect)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(-5, 5)))
def test_game_level0_and_monotone(diff):
    gt = P(np.zeros_like(diff))
    pred = P(diff)
    vals = [game(pred, gt, L) for L in range(5)]
    assert vals[0] == pytest.approx(abs(diff.sum()), abs=1e-9)
    assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))
    assert vals[-1] <= np.abs(diff).sum() + 1e-9


def test_game_batch_and_roi():
    a = P([[1.0, 0.0], [0.0, 0.0]])
    b = P(np.zeros((2, 2)))
    assert game_batch([a, b], [b, b], 0) == 0.5
    roi = RoiMask(np.array([[False, True], [True, True]]))
    assert game(a.with_roi(roi), b, 0) == 0.0
    with pytest.raises(ValidationError):
        game(a, P(np.zeros((3, 2))), 0)
    with pytest.raises(ValidationError):
        game(a, b, -1)


def test_losses():
    assert loss_combined(1.0, 1.0, [0, 1], [0, 1]) == 0.0
    # density loss 0.01 and aux loss 0.5 give 1.5 under the default weights
    p = [1.0, 0.0]
    phat = [math.exp(-0.5), 1 - math.exp(-0.5)]
    assert loss_combined(0.0, 0.1, p, phat) == pytest.approx(1.5)
    assert loss_aux([0, 0, 1, 0], [0.25] * 4) == pytest.approx(math.log(4))
    assert loss_density(3.0, 1.0) == 4.0
    with pytest.raises(InfiniteLossError):
        loss_aux([0, 1], [1, 0])
    with pytest.raises(ValidationError):
        LossConfig(-1, 1)
    with pytest.raises(ValidationError):
        loss_aux([0.5, 0.6], [0.5, 0.5])


def test_loss_pixel_count():
    gt = P(np.zeros((1, 2)))
    assert loss_pixel_count(gt, gt) == {"pixel": 0.0, "count": 0.0}
    assert loss_pixel_count(P([[1, -1]]), gt) == {"pixel": 2.0, "count": 0.0}
    g = P(np.ones((3, 4)))
    r = loss_pixel_count(P(g.values + 0.1), g)
    assert r["pixel"] == pytest.approx(0.12) and r["count"] == pytest.approx(1.2**2)


def test_scatter_stats():
    rng = np.random.default_rng(1)
    g = DensityMap(rng.random((6, 6)))
    s = scatter_stats(g, g)
    assert s["pearson"] == pytest.approx(1) and s["slope"] == pytest.approx(1) and s["intercept"] == pytest.approx(0)
    s = scatter_stats(P(2 * g.values), g)
    assert s["slope"] == pytest.approx(2) and s["intercept"] == pytest.approx(0, abs=1e-12)
    y = P(rng.normal(size=(6, 6)))
    s = scatter_stats(y, g)
    x, yy = g.values.ravel(), y.values.ravel()
    n = x.size
    # textbook formulas
    r = (n * (x @ yy) - x.sum() * yy.sum()) / math.sqrt((n * (x @ x) - x.sum() ** 2) * (n * (yy @ yy) - yy.sum() ** 2))
    b = (n * (x @ yy) - x.sum() * yy.sum()) / (n * (x @ x) - x.sum() ** 2)
    assert s["pearson"] == pytest.approx(r, abs=1e-9)
    assert s["slope"] == pytest.approx(b, abs=1e-9)
    assert s["intercept"] == pytest.approx(yy.mean() - b * x.mean(), abs=1e-9)
    with pytest.raises(DegenerateInputError):
        scatter_stats(g, DensityMap(np.ones((6, 6))))


def test_bbdr():
    m = synthesize_points([[20.5, 20.5]], SynthesisConfig(sigma=3.0), 41, 41)
    assert bbdr(m, [[20.5, 20.5]], BoxSpec(100, 100)) == 1.0
    assert bbdr(m, [], BoxSpec(6, 6)) == 0.0
    with pytest.raises(DegenerateInputError):
        bbdr(DensityMap(np.zeros((3, 3))), [[1, 1]], BoxSpec(2, 2))


def test_bbdr_gaussian_oracle():
    sigma, w = 3.0, 4.0
    m = synthesize_points([[40.0, 40.0]], SynthesisConfig(sigma=sigma), 80, 80)
    got = bbdr(m, [[40.0, 40.0]], BoxSpec(2 * w, 2 * w))
    assert got == pytest.approx(math.erf(w / (sigma * math.sqrt(2))) ** 2, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(1, 10), st.floats(0, 10))
def test_bbdr_bounds_and_monotone(seed, w, extra):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 30, (4, 2))
    m = synthesize_points(pts, SynthesisConfig(sigma=2.0), 30, 30)
    a = bbdr(m, pts, BoxSpec(w, w))
    b = bbdr(m, pts, BoxSpec(w + extra, w + extra))
    assert 0.0 <= a <= b + 1e-12 <= 1.0 + 1e-12


def test_box_perspective_scaling():
    persp = PerspectiveMap.linear_rows(40, 40, 1.0, 2.0)
    box = BoxSpec(4, 4, persp, 1.0)
    assert box.half_extent((5.0, 39.5)) == (4.0, 4.0)
    assert box.half_extent((5.0, 0.5)) == (2.0, 2.0)


def test_bbmae():
    cfg = SynthesisConfig(sigma=2.0)
    gt = synthesize_points([[20.5, 20.5]], cfg, 60, 60)
    box = BoxSpec(12, 12)
    assert bbmae(gt, gt, [[20.5, 20.5]], box) == 0.0
    moved = synthesize_points([[45.5, 20.5]], cfg, 60, 60)
    # the box keeps cells within +-6.5 px of the dot; the renormalized kernel spans +-8.5
    kept = (math.erf(6.5 / (2 * math.sqrt(2))) / math.erf(8.5 / (2 * math.sqrt(2)))) ** 2
    assert bbmae(moved, gt, [[20.5, 20.5]], box) == pytest.approx(kept, abs=1e-9)
    assert kept > 0.99
    zero = DensityMap(np.zeros((60, 60)))
    raw = synthesize_points([[20.5, 20.5]], SynthesisConfig(sigma=2.0, normalization="none"), 60, 60)
    mass = math.erf(6.5 / (2 * math.sqrt(2))) ** 2
    assert bbmae(zero, raw, [[20.5, 20.5]], box) == pytest.approx(mass, abs=1e-9)
    with pytest.raises(ValidationError):
        bbmae(gt, gt, [], box)


def test_temporal_mad():
    d = DensityMap(np.random.default_rng(2).random((4, 4)))
    assert temporal_mad([d, d, d]) == 0.0
    assert temporal_mad([d, DensityMap(d.values + 0.5)]) == pytest.approx(0.5)
    a, b, c = (DensityMap(np.full((2, 2), v)) for v in (0.0, 1.0, 4.0))
    assert temporal_mad([a, b, c]) == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        temporal_mad([d])


def test_match_basic():
    gt = [[1, 1], [5, 5]]
    m = match_detections(gt, gt, 1.0)
    assert m.true_positives == 2 and m.total_distance == 0.0
    m = match_detections([[3, 3]], [[2, 3], [4, 3]], 2.0)
    assert m.true_positives == 1 and len(m.unmatched_gt) == 1
    with pytest.raises(ValidationError):
        match_detections([], [], 0)


def _brute(det, gt, r):
    best = (0, 0.0)
    n, m = len(det), len(gt)
    dist = np.hypot(det[:, None, 0] - gt[None, :, 0], det[:, None, 1] - gt[None, :, 1]) if n and m else None
    # enumerate injective partial assignments of detections to gt
    def rec(i, used, k, tot):
        nonlocal best
        if i == n:
            if k > best[0] or (k == best[0] and tot < best[1] - 1e-12):
                best = (k, tot)
            return
        rec(i + 1, used, k, tot)
        for j in range(m):
            if j not in used and dist[i, j] <= r:
                rec(i + 1, used | {j}, k + 1, tot + dist[i, j])
    if n and m:
        rec(0, frozenset(), 0, 0.0)
    return best


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 6), st.integers(0, 6))
def test_match_against_brute_force(seed, n, m):
    rng = np.random.default_rng(seed)
    det = rng.uniform(0, 10, (n, 2))
    gt = rng.uniform(0, 10, (m, 2))
    res = match_detections(det, gt, 3.0)
    k, tot = _brute(det, gt, 3.0)
    assert res.true_positives == k
    assert res.total_distance == pytest.approx(tot, abs=1e-9)
    assert len({p[0] for p in res.pairs}) == len({p[1] for p in res.pairs}) == k


def test_prf():
    m = match_detections([[1, 1]], [[1, 1]], 1)
    assert prf(m) == {"precision": 1.0, "recall": 1.0, "f1": 1.0}
    m = match_detections([[1, 1]], [[1, 1], [9, 9]], 1)
    r = prf(m)
    assert (r["precision"], r["recall"]) == (1.0, 0.5) and r["f1"] == pytest.approx(2 / 3)
    assert prf(match_detections([], [[1, 1]], 1)) == {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    with pytest.raises(ValidationError):
        prf(m, n_dets=0, n_gt=0)


def _traj(offsets):
    gts = [np.array([[10.0, 10.0 + t]]) for t in range(len(offsets))]
    dets = [g + o for g, o in zip(gts, offsets)]
    ms = [match_detections(d, g, 5.0) for d, g in zip(dets, gts)]
    return trajectory_errors(ms, dets, gts, [(7,)] * len(gts))


def test_trajectory_errors():
    r = _traj([(0, 0)] * 4)
    assert r["ed_mean"] == 0 and r["edd_mean"] == 0 and r["miss_rate"] == 0
    r = _traj([(2, 0)] * 4)
    assert r["ed_mean"] == 2 and r["edd_mean"] == 0
    r = _traj([(1, 0), (-1, 0)] * 3)
    assert r["ed_mean"] == 1 and r["edd_mean"] == 2
    m = match_detections([], [[1, 1]], 1)
    r = trajectory_errors([m], [[]], [[[1, 1]]], [(0,)])
    assert r["miss_rate"] == 1.0 and math.isnan(r["ed_mean"])
    with pytest.raises(ValidationError):
        trajectory_errors([m], [[]], [[[1, 1]]], [None])


def test_precision_curve():
    assert tracking_precision_curve([0, 0], [0, 1, 5]) == [(0.0, 1.0), (1.0, 1.0), (5.0, 1.0)]
    assert tracking_precision_curve([1, 3], [2]) == [(2.0, 0.5)]
    with pytest.raises(ValidationError):
        tracking_precision_curve([], [1])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=30), st.lists(st.floats(0, 60), min_size=1, max_size=10))
def test_precision_curve_monotone(errors, thresholds):
    curve = tracking_precision_curve(errors, sorted(thresholds))
    fr = [f for _, f in curve]
    assert all(b >= a for a, b in zip(fr, fr[1:]))


def test_points_in_roi():
    roi = RoiMask(np.array([[True, False]]))
    pts = [[0.5, 0.5], [1.5, 0.5]]
    np.testing.assert_array_equal(points_in_roi(pts, roi), [[0.5, 0.5]])
    assert len(points_in_roi(pts, None)) == 2
