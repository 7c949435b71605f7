"""Curve-level detection metrics and the calibration diagnostic.

Curve IOU follows the arc-length definition: the detected polyline is
resampled at 0.5 m steps, the intersection is the summed arc length of
samples within the distance threshold of the GT curve, and the union is
the longer curve's length.  Matching is per lane curve (greedy in score
order), AP integrates the monotone precision envelope over recall, and
ENCE compares root-mean-variance against root-mean-squared-error in
equal-count bins.

Detections enter as :class:`lanetiles.clustering.LaneDetection`; ground
truth enters as BEV polylines, (N, 2) or (N, 3) with height as the third
column.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import polyline_min_dist
from .clustering import LaneDetection

RESAMPLE_STEP = 0.5
DEFAULT_IOU_THRESHOLDS = tuple(np.round(np.arange(0.1, 0.95, 0.1), 2))
NEAR_RANGE = (0.0, 30.0)
FAR_RANGE = (30.0, 80.0)


def polyline_length(poly: np.ndarray) -> float:
    poly = np.asarray(poly, dtype=np.float64)
    return float(np.linalg.norm(np.diff(poly[:, :2], axis=0), axis=1).sum())


def resample_midpoints(poly: np.ndarray, step: float = RESAMPLE_STEP):
    """Midpoint arc samples: (points (M, 2), per-sample arc weight)."""
    xy = np.asarray(poly, dtype=np.float64)[:, :2]
    if xy.shape[0] < 2:
        raise ValueError("polyline needs at least 2 points")
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    total = float(seg.sum())
    if total <= 0:
        raise ValueError("degenerate polyline of zero length")
    n = max(1, int(round(total / step)))
    stations = (np.arange(n) + 0.5) * (total / n)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    idx = np.clip(np.searchsorted(cum, stations) - 1, 0, len(seg) - 1)
    t = (stations - cum[idx]) / np.maximum(seg[idx], 1e-300)
    pts = xy[idx] + t[:, None] * (xy[idx + 1] - xy[idx])
    return pts, total / n


def curve_iou(pred: np.ndarray, gt: np.ndarray, dist_threshold: float) -> float:
    """Arc-length IOU of two BEV polylines."""
    if dist_threshold <= 0:
        raise ValueError("dist_threshold must be positive")
    samples, weight = resample_midpoints(pred)
    gt = np.asarray(gt, dtype=np.float64)[:, :2]
    if gt.shape[0] < 2:
        raise ValueError("GT polyline needs at least 2 points")
    dist = polyline_min_dist(samples, gt)
    intersection = weight * float((dist < dist_threshold).sum())
    union = max(polyline_length(pred), polyline_length(gt))
    return float(min(1.0, intersection / union))


@dataclass
class Matching:
    tp_pairs: list  # [(det_idx, gt_idx, iou), ...]
    fp: list        # unmatched detection indices
    fn: list        # unmatched GT indices


def _iou_matrix(dets, gts, dist_threshold) -> np.ndarray:
    mat = np.zeros((len(dets), len(gts)))
    for a, det in enumerate(dets):
        for b, gt in enumerate(gts):
            mat[a, b] = curve_iou(det.bev, gt, dist_threshold)
    return mat


def _greedy_match(iou_mat, scores, iou_threshold) -> Matching:
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k))
    taken = set()
    tp, fp = [], []
    for k in order:
        best = -1
        for b in range(iou_mat.shape[1]):
            if b in taken or iou_mat[k, b] < iou_threshold:
                continue
            if best < 0 or iou_mat[k, b] > iou_mat[k, best]:
                best = b
        if best >= 0:
            taken.add(best)
            tp.append((k, best, float(iou_mat[k, best])))
        else:
            fp.append(k)
    fn = [b for b in range(iou_mat.shape[1]) if b not in taken]
    return Matching(tp_pairs=tp, fp=fp, fn=fn)


def associate(
    dets: list[LaneDetection],
    gts: list[np.ndarray],
    dist_threshold: float = 1.0,
    iou_threshold: float = 0.5,
) -> Matching:
    """Greedy one-to-one curve matching in descending score order."""
    if dist_threshold <= 0 or iou_threshold < 0:
        raise ValueError("thresholds must be positive")
    mat = _iou_matrix(dets, gts, dist_threshold)
    return _greedy_match(mat, [d.score for d in dets], iou_threshold)


@dataclass
class EvalReport:
    ap: float
    ap_per_threshold: dict
    ap50: float
    ap90: float
    recall: float
    lateral_near: float | None
    lateral_far: float | None
    z_near: float | None
    z_far: float | None
    counts: dict = field(default_factory=dict)  # per threshold: tp/fp/fn
    n_detections: int = 0
    n_gt: int = 0

    def to_obj(self) -> dict:
        return {
            "ap": self.ap,
            "ap_per_threshold": {f"{k:.1f}": v for k, v in self.ap_per_threshold.items()},
            "ap50": self.ap50,
            "ap90": self.ap90,
            "recall": self.recall,
            "lateral_error_near_m": self.lateral_near,
            "lateral_error_far_m": self.lateral_far,
            "z_error_near_m": self.z_near,
            "z_error_far_m": self.z_far,
            "counts": {f"{k:.1f}": v for k, v in self.counts.items()},
            "n_detections": self.n_detections,
            "n_gt": self.n_gt,
        }


def _envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolation: integrate the monotone precision envelope."""
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[1.0], precision])
    env = np.maximum.accumulate(p[::-1])[::-1]
    return float(((r[1:] - r[:-1]) * env[1:]).sum())


def average_precision(
    dets_per_scene: list[list[LaneDetection]],
    gts_per_scene: list[list[np.ndarray]],
    iou_thresholds=DEFAULT_IOU_THRESHOLDS,
    dist_threshold: float = 1.0,
) -> EvalReport:
    """Per-lane AP averaged over curve-IOU thresholds, plus range errors."""
    n_gt = sum(len(g) for g in gts_per_scene)
    if n_gt == 0:
        raise ValueError("AP undefined: no GT lanes")
    mats = [
        _iou_matrix(dets, gts, dist_threshold)
        for dets, gts in zip(dets_per_scene, gts_per_scene)
    ]

    ap_per_threshold: dict[float, float] = {}
    counts: dict[float, dict] = {}
    matched_pairs_50: list[tuple[LaneDetection, np.ndarray]] = []
    recall_50 = 0.0
    pooled_scores = []
    for s, dets in enumerate(dets_per_scene):
        for k, det in enumerate(dets):
            pooled_scores.append((det.score, s, k))
    pooled_scores.sort(key=lambda x: (-x[0], x[1], x[2]))

    for thr in iou_thresholds:
        thr = float(thr)
        flags = {}
        tp = fp = 0
        for s, dets in enumerate(dets_per_scene):
            match = _greedy_match(mats[s], [d.score for d in dets], thr)
            for k, b, _ in match.tp_pairs:
                flags[(s, k)] = True
            for k in match.fp:
                flags[(s, k)] = False
            tp += len(match.tp_pairs)
            fp += len(match.fp)
            if abs(thr - 0.5) < 1e-9:
                matched_pairs_50.extend(
                    (dets[k], gts_per_scene[s][b]) for k, b, _ in match.tp_pairs
                )
        counts[thr] = {"tp": tp, "fp": fp, "fn": n_gt - tp}
        if abs(thr - 0.5) < 1e-9:
            recall_50 = tp / n_gt

        tp_seq = np.array([1.0 if flags[(s, k)] else 0.0 for _, s, k in pooled_scores])
        if tp_seq.size == 0:
            ap_per_threshold[thr] = 0.0
            continue
        tp_cum = np.cumsum(tp_seq)
        fp_cum = np.cumsum(1.0 - tp_seq)
        recall = tp_cum / n_gt
        precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-300)
        ap_per_threshold[thr] = _envelope_ap(recall, precision)

    lat_near, lat_far, z_near, z_far = lateral_errors(matched_pairs_50)
    return EvalReport(
        ap=float(np.mean(list(ap_per_threshold.values()))),
        ap_per_threshold=ap_per_threshold,
        ap50=ap_per_threshold.get(0.5, 0.0),
        ap90=ap_per_threshold.get(0.9, 0.0),
        recall=recall_50,
        lateral_near=lat_near,
        lateral_far=lat_far,
        z_near=z_near,
        z_far=z_far,
        counts=counts,
        n_detections=len(pooled_scores),
        n_gt=n_gt,
    )


def lateral_errors(matched_pairs):
    """Mean absolute lateral (and height) error of detected points on TP
    lanes, split into near (0-30 m) and far (30-80 m) range bins.

    Empty bins report None.  Height errors need GT polylines with a
    z column and detections carrying (r, phi, dz) params; otherwise the
    z entries are None.
    """
    near_lat, far_lat, near_z, far_z = [], [], [], []
    for det, gt in matched_pairs:
        gt = np.asarray(gt, dtype=np.float64)
        lat = polyline_min_dist(det.bev, gt[:, :2])
        for p in range(det.bev.shape[0]):
            y = det.bev[p, 1]
            bucket_lat = near_lat if NEAR_RANGE[0] <= y < NEAR_RANGE[1] else (
                far_lat if FAR_RANGE[0] <= y <= FAR_RANGE[1] else None
            )
            if bucket_lat is None:
                continue
            bucket_lat.append(lat[p])
            if gt.shape[1] >= 3 and det.params is not None:
                k = int(np.argmin(np.linalg.norm(gt[:, :2] - det.bev[p], axis=1)))
                dz_err = abs(det.params[p, 2] - gt[k, 2])
                (near_z if bucket_lat is near_lat else far_z).append(dz_err)

    def mean(vals):
        return float(np.mean(vals)) if vals else None

    return mean(near_lat), mean(far_lat), mean(near_z), mean(far_z)


@dataclass
class CalibrationReport:
    rmv: list[float]
    rmse: list[float]
    bin_counts: list[int]
    ence: float

    def to_obj(self) -> dict:
        return {
            "ence": self.ence,
            "n_bins": len(self.rmv),
            "bins": [
                {"rmv": v, "rmse": e, "count": c}
                for v, e, c in zip(self.rmv, self.rmse, self.bin_counts)
            ],
        }

    def to_csv(self) -> str:
        lines = ["bin,rmv,rmse"]
        lines += [f"{k},{v!r},{e!r}" for k, (v, e) in enumerate(zip(self.rmv, self.rmse))]
        return "\n".join(lines) + "\n"


def ence(records: np.ndarray, n_bins: int = 10) -> CalibrationReport:
    """Expected Normalized Calibration Error over equal-count bins.

    records: (N, 2) array of (predicted variance, empirical squared
    error); sorted by variance, split into n_bins bins of equal count
    (+-1), ENCE = mean over bins of |RMV - RMSE| / RMV.
    """
    records = np.asarray(records, dtype=np.float64)
    if records.ndim != 2 or records.shape[1] != 2:
        raise ValueError("records must be (N, 2): variance, squared error")
    if records.shape[0] < n_bins:
        raise ValueError(f"need at least {n_bins} records, got {records.shape[0]}")
    order = np.argsort(records[:, 0], kind="stable")
    chunks = np.array_split(records[order], n_bins)
    rmv, rmse, bin_counts = [], [], []
    for chunk in chunks:
        v = float(np.sqrt(chunk[:, 0].mean()))
        if v <= 0:
            raise ValueError("bin with zero root-mean-variance")
        rmv.append(v)
        rmse.append(float(np.sqrt(chunk[:, 1].mean())))
        bin_counts.append(len(chunk))
    errs = [abs(v - e) / v for v, e in zip(rmv, rmse)]
    return CalibrationReport(rmv=rmv, rmse=rmse, bin_counts=bin_counts, ence=float(np.mean(errs)))


def calibration_records(matched_pairs) -> np.ndarray:
    """(N, 2) ENCE records from matched detections: predicted variance =
    max eigenvalue of the point covariance, SE = squared lateral error."""
    rows = []
    for det, gt in matched_pairs:
        gt = np.asarray(gt, dtype=np.float64)
        lat = polyline_min_dist(det.bev, gt[:, :2])
        for p in range(det.bev.shape[0]):
            var = float(np.linalg.eigvalsh(det.covariances[p]).max())
            rows.append((var, float(lat[p] ** 2)))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)
