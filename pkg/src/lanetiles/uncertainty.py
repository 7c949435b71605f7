"""Squared-error supervision for the variance heads, and temperature scaling.

Two ways to measure the empirical error of a tile's (r, phi, dz)
prediction:

  * tile-local: against the tile's own ground-truth target, on the tiles
    where occupancy is supervised.  Errors are bounded by the tile size.
  * global-context: cluster the predictions into lane curves, associate
    them to GT lanes by curve IOU, then recompute what the associated GT
    curve says the tile's parameters should have been.  Errors grow with
    the actual detection displacement.

Temperature scaling multiplies each predicted variance by a per-parameter
scalar fitted in closed form on held-out records.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import evaluation, geometry, tilecodec
from .clustering import LaneDetection
from .geometry import CameraPose, GridConfig, wrap_angle
from .scenegen import Scene
from .tilecodec import PredictionGrid, TargetGrid

# the "extended neighbourhood" each tile is grown by (metres per side)
# when clipping the associated GT curve for error recomputation
NEIGHBOURHOOD_MARGIN = 0.5


@dataclass
class SERecord:
    """Per-tile squared errors and the variances predicted there."""

    tile: tuple[int, int]
    se: np.ndarray        # (3,) squared errors for (r, phi, dz)
    variance: np.ndarray  # (3,) predicted variances
    lane_id: int | None   # associated GT lane id, None if unassociated


@dataclass(frozen=True)
class TemperatureParams:
    t_r: float
    t_phi: float
    t_dz: float

    def __post_init__(self):
        if min(self.t_r, self.t_phi, self.t_dz) <= 0:
            raise ValueError("temperatures must be positive")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.t_r, self.t_phi, self.t_dz)

    def to_obj(self) -> dict:
        return {"t_r": self.t_r, "t_phi": self.t_phi, "t_dz": self.t_dz}

    @classmethod
    def from_obj(cls, obj: dict) -> "TemperatureParams":
        return cls(t_r=obj["t_r"], t_phi=obj["t_phi"], t_dz=obj["t_dz"])


def _decoded_params(preds: PredictionGrid, j: int, i: int):
    k = int(np.argmax(preds.bin_logits[j, i]))
    phi = float(
        wrap_angle(tilecodec.bin_centers(preds.n_bins)[k] + preds.bin_residuals[j, i, k])
    )
    return float(preds.r[j, i]), phi, float(preds.dz[j, i])


def tile_local_se(preds: PredictionGrid, targets: TargetGrid) -> list[SERecord]:
    """Squared errors on the GT-occupied tiles against their own targets."""
    if preds.score_logit.shape != targets.c.shape:
        raise ValueError("prediction and target grids have different shapes")
    records = []
    var = np.exp(np.clip(preds.log_var, -60.0, 60.0))
    for j, i in np.argwhere(targets.c):
        r, phi, dz = _decoded_params(preds, j, i)
        se = np.array(
            [
                (r - targets.r[j, i]) ** 2,
                float(wrap_angle(phi - targets.phi[j, i])) ** 2,
                (dz - targets.dz[j, i]) ** 2,
            ]
        )
        records.append(
            SERecord(
                tile=(int(j), int(i)),
                se=se,
                variance=var[j, i].copy(),
                lane_id=int(targets.lane_id[j, i]),
            )
        )
    return records


def _gt_params_for_tile(
    bev_lane: np.ndarray, grid: GridConfig, j: int, i: int
) -> tuple[float, float, float]:
    """(r, phi, dz) the GT curve implies for tile (j, i).

    Clips the curve to the tile grown by NEIGHBOURHOOD_MARGIN; if the
    curve misses that neighbourhood entirely, falls back to the line of
    the nearest GT segment.
    """
    xmin, xmax, ymin, ymax = grid.tile_bounds(i, j)
    center = geometry.tile_center(grid, i, j)
    m = NEIGHBOURHOOD_MARGIN
    pts = tilecodec.clip_polyline_to_rect(bev_lane, xmin - m, xmax + m, ymin - m, ymax + m)
    if pts.shape[0] >= 2:
        fit = tilecodec._fit_tile_line(pts)
        if fit is not None:
            mean, d = fit
            phi = float(wrap_angle(math.atan2(d[1], d[0])))
            normal = np.array([math.sin(phi), -math.cos(phi)])
            r = float((mean - center) @ normal)
            foot = center + r * normal
            dz = tilecodec._fit_height_at(pts, mean, d, foot)
            return r, phi, dz

    # nearest segment of the full curve
    a, b = bev_lane[:-1, :2], bev_lane[1:, :2]
    v = b - a
    vv = np.maximum((v * v).sum(axis=1), 1e-300)
    t = np.clip(((center - a) * v).sum(axis=1) / vv, 0.0, 1.0)
    closest = a + t[:, None] * v
    k = int(np.argmin(((center - closest) ** 2).sum(axis=1)))
    d = v[k] / math.sqrt(vv[k])
    phi = float(wrap_angle(math.atan2(d[1], d[0])))
    normal = np.array([math.sin(phi), -math.cos(phi)])
    r = float((bev_lane[k, :2] - center) @ normal)
    dz = float(bev_lane[k, 2] + t[k] * (bev_lane[k + 1, 2] - bev_lane[k, 2]))
    return r, phi, dz


def global_se(
    detections: list[LaneDetection],
    scene: Scene,
    grid: GridConfig,
    assoc_threshold: float = 1.0,
    assoc_iou: float = 0.1,
) -> list[SERecord]:
    """Squared errors of detected tiles against their lane's associated
    GT curve (curve-level association, then per-tile recomputation)."""
    if assoc_threshold <= 0:
        raise ValueError("assoc_threshold must be positive")
    lanes_bev = scene.lanes_bev()
    if not lanes_bev:
        return []
    if not detections:
        return []
    match = evaluation.associate(
        detections, [b[:, :2] for b in lanes_bev], assoc_threshold, assoc_iou
    )
    records = []
    for det_idx, gt_idx, _ in sorted(match.tp_pairs):
        det = detections[det_idx]
        bev_lane = lanes_bev[gt_idx]
        for p, (j, i) in enumerate(det.member_tiles):
            r_gt, phi_gt, dz_gt = _gt_params_for_tile(bev_lane, grid, j, i)
            r, phi, dz = det.params[p]
            se = np.array(
                [
                    (r - r_gt) ** 2,
                    float(wrap_angle(phi - phi_gt)) ** 2,
                    (dz - dz_gt) ** 2,
                ]
            )
            records.append(
                SERecord(
                    tile=(int(j), int(i)),
                    se=se,
                    variance=np.asarray(det.variances[p], dtype=np.float64),
                    lane_id=scene.lanes[gt_idx].id,
                )
            )
    return records


def fit_temperature(records: list[SERecord]) -> TemperatureParams:
    """Closed-form per-parameter temperature: T = mean(e^2 / sigma^2).

    This is the stationary point of the Gaussian NLL in T when every
    variance is scaled multiplicatively, so mean(e^2 / (T sigma^2)) = 1
    afterwards.
    """
    if not records:
        raise ValueError("need at least one record per parameter")
    se = np.stack([rec.se for rec in records])
    var = np.stack([rec.variance for rec in records])
    if np.any((var <= 0) & (se > 0)):
        raise ValueError("zero predicted variance with nonzero error: NLL is infinite")
    ratios = np.divide(se, var, out=np.zeros_like(se), where=var > 0)
    t = ratios.mean(axis=0)
    return TemperatureParams(t_r=float(t[0]), t_phi=float(t[1]), t_dz=float(t[2]))


def apply_temperature_to_detection(
    det: LaneDetection, grid: GridConfig, pose: CameraPose, temps: TemperatureParams
) -> LaneDetection:
    """Re-propagate point covariances with temperature-scaled variances.

    Means, member tiles and scores are untouched; only the uncertainty
    changes."""
    scaled = np.asarray(det.variances, dtype=np.float64) * np.asarray(temps.as_tuple())
    covs = []
    for p, (j, i) in enumerate(det.member_tiles):
        center = geometry.tile_center(grid, i, j)
        r, phi, dz = det.params[p]
        covs.append(
            geometry.propagate_covariance(
                scaled[p, 0], scaled[p, 1], scaled[p, 2], r, phi, dz, center, pose
            )
        )
    return dataclasses.replace(det, covariances=np.stack(covs), variances=scaled)


def records_nll(records: list[SERecord], temperature: TemperatureParams | None = None):
    """Mean Gaussian NLL of the records per parameter (constant dropped)."""
    se = np.stack([rec.se for rec in records])
    var = np.stack([rec.variance for rec in records])
    if temperature is not None:
        var = var * np.asarray(temperature.as_tuple())
    nll = 0.5 * np.log(var) + se / (2.0 * var)
    per_param = nll.mean(axis=0)
    return {
        "r": float(per_param[0]),
        "phi": float(per_param[1]),
        "dz": float(per_param[2]),
        "total": float(per_param.sum()),
    }
