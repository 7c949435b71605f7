"""Metric tests.

The AP oracle enumerates every score cutoff explicitly, greedy-matches
the kept detections per scene and integrates the precision envelope --
a separate code path from the ranked-cumsum implementation.  The
association oracle enumerates all injective detection->GT assignments.
ENCE is re-derived with an independent binning routine.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from lanetiles import evaluation as ev
from lanetiles.clustering import LaneDetection


def det_from_bev(bev, score=1.0, z=None):
    bev = np.asarray(bev, dtype=np.float64)
    n = bev.shape[0]
    params = np.zeros((n, 3))
    if z is not None:
        params[:, 2] = z
    return LaneDetection(
        points=np.column_stack([bev, np.zeros(n)]),
        directions=np.tile([0.0, 1.0, 0.0], (n, 1)),
        covariances=np.tile(np.eye(3) * 1e-4, (n, 1, 1)),
        bev=bev,
        score=float(score),
        member_tiles=[(k, 0) for k in range(n)],
        params=params,
        variances=np.full((n, 3), 1e-4),
    )


def straight(x, y0=0.0, y1=60.0, step=1.0):
    ys = np.arange(y0, y1 + 1e-9, step)
    return np.column_stack([np.full_like(ys, x), ys])


# ── curve_iou ────────────────────────────────────────────────────────────

def test_curve_iou_identical():
    gt = straight(0.0)
    assert ev.curve_iou(gt, gt, 1.0) == pytest.approx(1.0, abs=0.02)


def test_curve_iou_half_coverage():
    gt = straight(0.0, 0.0, 60.0)
    pred = straight(0.0, 0.0, 30.0)
    assert ev.curve_iou(pred, gt, 1.0) == pytest.approx(0.5, abs=0.02)


def test_curve_iou_parallel_beyond_threshold():
    gt = straight(0.0)
    pred = straight(2.0)
    assert ev.curve_iou(pred, gt, 1.0) == 0.0


def test_curve_iou_degenerate():
    with pytest.raises(ValueError):
        ev.curve_iou(np.array([[0.0, 0.0]]), straight(0.0), 1.0)
    with pytest.raises(ValueError):
        ev.curve_iou(np.array([[0.0, 0.0], [0.0, 0.0]]), straight(0.0), 1.0)


def test_curve_iou_bounded_by_length_ratio():
    rng = np.random.default_rng(0)
    gt = straight(0.0, 0.0, 50.0)
    for _ in range(20):
        y1 = rng.uniform(5.0, 80.0)
        pred = straight(rng.uniform(-0.5, 0.5), 0.0, y1)
        iou = ev.curve_iou(pred, gt, 1.0)
        bound = min(1.0, ev.polyline_length(pred) / ev.polyline_length(gt))
        assert iou <= bound + 0.02


# ── associate ────────────────────────────────────────────────────────────

def test_associate_one_to_one():
    gt = [straight(0.0)]
    dets = [det_from_bev(straight(0.0))]
    m = ev.associate(dets, gt, 1.0, 0.5)
    assert len(m.tp_pairs) == 1 and not m.fp and not m.fn


def test_associate_second_detection_is_fp():
    gt = [straight(0.0)]
    dets = [det_from_bev(straight(0.0), score=0.9), det_from_bev(straight(0.1), score=0.8)]
    m = ev.associate(dets, gt, 1.0, 0.5)
    assert len(m.tp_pairs) == 1
    assert m.tp_pairs[0][0] == 0
    assert m.fp == [1]


def brute_force_best_assignment(iou_mat, iou_threshold):
    """Maximum-cardinality assignment via exhaustive enumeration."""
    n_det, n_gt = iou_mat.shape
    best = []
    for k in range(min(n_det, n_gt), -1, -1):
        for det_sub in itertools.combinations(range(n_det), k):
            for gt_perm in itertools.permutations(range(n_gt), k):
                if all(iou_mat[d, g] >= iou_threshold for d, g in zip(det_sub, gt_perm)):
                    best.append(list(zip(det_sub, gt_perm)))
        if best:
            return k
    return 0


def test_associate_matches_exhaustive_assignment():
    # 3 GT lanes, 3 detections with one laterally shifted: greedy must
    # find the same number of matches as exhaustive enumeration
    gts = [straight(-3.7), straight(0.0), straight(3.7)]
    dets = [
        det_from_bev(straight(-3.7), 0.9),
        det_from_bev(straight(0.45), 0.8),  # shifted but within 1 m
        det_from_bev(straight(3.7), 0.7),
    ]
    mat = ev._iou_matrix(dets, gts, 1.0)
    m = ev.associate(dets, gts, 1.0, 0.5)
    assert len(m.tp_pairs) == brute_force_best_assignment(mat, 0.5)
    pairs = {(a, b) for a, b, _ in m.tp_pairs}
    assert pairs == {(0, 0), (1, 1), (2, 2)}


# ── average_precision ────────────────────────────────────────────────────

def oracle_ap(dets_per_scene, gts_per_scene, iou_thr, dist_thr):
    """Explicit score-cutoff sweep + envelope integration."""
    n_gt = sum(len(g) for g in gts_per_scene)
    scores = sorted({d.score for dets in dets_per_scene for d in dets}, reverse=True)
    points = []
    for cut in scores:
        tp = fp = 0
        for dets, gts in zip(dets_per_scene, gts_per_scene):
            kept = [d for d in dets if d.score >= cut]
            m = ev.associate(kept, gts, dist_thr, iou_thr)
            tp += len(m.tp_pairs)
            fp += len(m.fp)
        points.append((tp / n_gt, tp / max(tp + fp, 1)))
    points.sort()
    recalls = np.array([0.0] + [r for r, _ in points])
    precisions = np.array([1.0] + [p for _, p in points])
    env = np.maximum.accumulate(precisions[::-1])[::-1]
    return float(((recalls[1:] - recalls[:-1]) * env[1:]).sum())


def fixture_4lane_6det():
    gts = [[straight(-5.0), straight(-1.0), straight(3.0), straight(7.0)]]
    dets = [[
        det_from_bev(straight(-5.0), 0.95),            # clean TP
        det_from_bev(straight(-1.3), 0.9),             # shifted, still inside 1 m
        det_from_bev(straight(3.0, 0.0, 30.0), 0.85),  # half-length
        det_from_bev(straight(12.0), 0.8),             # far FP
        det_from_bev(straight(-5.1), 0.7),             # duplicate of lane 0
        det_from_bev(straight(7.0, 10.0, 60.0), 0.6),  # late start
    ]]
    return dets, gts


def test_average_precision_perfect():
    gts = [[straight(-2.0), straight(2.0)]]
    dets = [[det_from_bev(straight(-2.0)), det_from_bev(straight(2.0))]]
    report = ev.average_precision(dets, gts)
    assert report.ap == pytest.approx(1.0)
    assert all(v == pytest.approx(1.0) for v in report.ap_per_threshold.values())
    assert report.recall == pytest.approx(1.0)


def test_average_precision_no_detections():
    report = ev.average_precision([[]], [[straight(0.0)]])
    assert report.ap == 0.0
    assert report.recall == 0.0


def test_average_precision_no_gt_is_error():
    with pytest.raises(ValueError):
        ev.average_precision([[det_from_bev(straight(0.0))]], [[]])


def test_average_precision_matches_bruteforce_oracle():
    dets, gts = fixture_4lane_6det()
    report = ev.average_precision(dets, gts)
    for thr, got in report.ap_per_threshold.items():
        want = oracle_ap(dets, gts, thr, 1.0)
        assert got == pytest.approx(want, abs=1e-12), f"thr={thr}"


def test_average_precision_monotone_in_iou_threshold():
    dets, gts = fixture_4lane_6det()
    report = ev.average_precision(dets, gts)
    values = [report.ap_per_threshold[float(t)] for t in ev.DEFAULT_IOU_THRESHOLDS]
    assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))


def test_duplicate_tp_detection_never_increases_ap():
    gts = [[straight(-2.0), straight(2.0)]]
    base = [[det_from_bev(straight(-2.0), 0.9), det_from_bev(straight(2.0), 0.8)]]
    report_base = ev.average_precision(base, gts)
    dup = [base[0] + [det_from_bev(straight(-2.02), 0.7)]]
    report_dup = ev.average_precision(dup, gts)
    for thr in report_base.ap_per_threshold:
        assert report_dup.ap_per_threshold[thr] <= report_base.ap_per_threshold[thr] + 1e-12
    assert report_dup.counts[0.5]["fp"] == report_base.counts[0.5]["fp"] + 1


# ── lateral_errors ───────────────────────────────────────────────────────

def test_lateral_errors_perfect():
    gt = straight(0.0, 0.0, 70.0)
    near, far, _, _ = ev.lateral_errors([(det_from_bev(gt), gt)])
    assert near == pytest.approx(0.0, abs=1e-9)
    assert far == pytest.approx(0.0, abs=1e-9)


def test_lateral_errors_uniform_shift():
    gt = straight(0.0, 0.0, 70.0)
    det = det_from_bev(straight(0.2, 0.0, 70.0))
    near, far, _, _ = ev.lateral_errors([(det, gt)])
    assert near == pytest.approx(0.2, abs=1e-3)
    assert far == pytest.approx(0.2, abs=1e-3)


def test_lateral_errors_hand_fixture():
    # two points at y=10 (0.3 off) and y=50 (0.1 off): means are exact
    gt = straight(0.0, 0.0, 70.0)
    det = det_from_bev(np.array([[0.3, 10.0], [0.3, 12.0], [0.1, 50.0], [0.1, 52.0]]))
    near, far, _, _ = ev.lateral_errors([(det, gt)])
    assert near == pytest.approx(0.3, abs=1e-9)
    assert far == pytest.approx(0.1, abs=1e-9)


def test_lateral_errors_empty_bin_absent():
    gt = straight(0.0, 0.0, 25.0)
    det = det_from_bev(straight(0.0, 0.0, 25.0))
    near, far, _, _ = ev.lateral_errors([(det, gt)])
    assert near is not None
    assert far is None


# ── ence ─────────────────────────────────────────────────────────────────

def oracle_ence(records, n_bins):
    """Independent ENCE over the declared binning convention: records
    sorted by variance, first n % n_bins bins hold one extra record."""
    rec = sorted(map(tuple, records), key=lambda t: t[0])
    n = len(rec)
    base, extra = divmod(n, n_bins)
    total, start = 0.0, 0
    for k in range(n_bins):
        size = base + (1 if k < extra else 0)
        chunk = rec[start : start + size]
        start += size
        rmv = math.sqrt(sum(v for v, _ in chunk) / len(chunk))
        rmse = math.sqrt(sum(e for _, e in chunk) / len(chunk))
        total += abs(rmv - rmse) / rmv
    return total / n_bins


def test_ence_perfectly_calibrated():
    rng = np.random.default_rng(1)
    var = rng.uniform(0.01, 2.0, 200)
    report = ev.ence(np.column_stack([var, var]), 10)
    assert report.ence == pytest.approx(0.0, abs=1e-12)
    assert report.bin_counts == [20] * 10


def test_ence_scaling_by_four():
    rng = np.random.default_rng(2)
    se = rng.uniform(0.01, 1.0, 100)
    report = ev.ence(np.column_stack([4.0 * se, se]), 10)
    assert report.ence == pytest.approx(0.5, abs=1e-12)


def test_ence_matches_second_implementation():
    rng = np.random.default_rng(3)
    records = np.column_stack([rng.uniform(0.01, 3.0, 173), rng.uniform(0.0, 3.0, 173)])
    report = ev.ence(records, 10)
    assert report.ence == pytest.approx(oracle_ence(records, 10), abs=1e-12)


def test_ence_order_invariant():
    rng = np.random.default_rng(4)
    records = np.column_stack([rng.uniform(0.01, 3.0, 60), rng.uniform(0.0, 3.0, 60)])
    a = ev.ence(records, 6)
    b = ev.ence(records[rng.permutation(60)], 6)
    assert a.ence == pytest.approx(b.ence, abs=1e-12)


def test_ence_errors():
    with pytest.raises(ValueError):
        ev.ence(np.zeros((5, 2)), 10)  # too few records
    with pytest.raises(ValueError):
        ev.ence(np.column_stack([np.zeros(20), np.ones(20)]), 10)  # zero RMV


def test_ence_csv_export():
    rng = np.random.default_rng(5)
    var = rng.uniform(0.01, 2.0, 50)
    report = ev.ence(np.column_stack([var, var]), 5)
    lines = report.to_csv().strip().split("\n")
    assert lines[0] == "bin,rmv,rmse"
    assert len(lines) == 6
