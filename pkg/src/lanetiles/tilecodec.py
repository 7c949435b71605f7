"""Bidirectional mapping between lane curves and the per-tile representation.

Encoding clips each BEV-projected lane polyline to every tile rectangle
it crosses, fits a total-least-squares line to the clipped points, and
stores (occupancy, signed lateral offset r, direction angle phi as soft
bins + residuals, height offset dz, lane instance id).  Decoding turns
per-tile predictions back into 3D camera-frame points with propagated
covariances.

Targets and predictions serialize to JSON objects with row-major (j, i)
layout; prediction tensors are base64 float64 blobs.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from ._kernels import polyline_min_dist
from .geometry import CameraPose, GridConfig, wrap_angle
from .scenegen import Scene

TWO_PI = 2.0 * math.pi

# a tile keeps a lane only if the clip has at least this many distinct points
MIN_CLIP_POINTS = 2
# and only if the perpendicular foot of the tile center stays this close to
# the lane polyline; at lane termini the foot extrapolates past the curve
# end, which the (r, phi) segment model cannot represent
MAX_FOOT_DIST = 0.12
_PERFECT_LOGIT = 30.0


def bin_centers(n_bins: int) -> np.ndarray:
    """Angle bin centers 2*pi*i/N, i = 0..N-1."""
    return TWO_PI * np.arange(n_bins) / n_bins


@dataclass
class AngleEncoding:
    """Soft triangular bin probabilities plus per-bin residuals and mask."""

    n_bins: int
    probs: np.ndarray      # (..., N) in [0, 1], at most two nonzero
    residuals: np.ndarray  # (..., N) wrap(phi - alpha_i)
    mask: np.ndarray       # (..., N) bool, argmax bin and both neighbours


def angle_targets(phi, n_bins: int) -> AngleEncoding:
    """Soft multi-label angle targets for direction angle(s) phi."""
    if n_bins < 4:
        raise ValueError("need at least 4 angle bins")
    phi = np.asarray(phi, dtype=np.float64)
    alpha = bin_centers(n_bins)
    diff = wrap_angle(phi[..., None] - alpha)
    binwidth = TWO_PI / n_bins
    probs = np.clip(1.0 - np.abs(diff) / binwidth, 0.0, None)
    top = np.argmin(np.abs(diff), axis=-1)
    mask = np.zeros(probs.shape, dtype=bool)
    for shift in (-1, 0, 1):
        np.put_along_axis(mask, ((top + shift) % n_bins)[..., None], True, axis=-1)
    return AngleEncoding(n_bins=n_bins, probs=probs, residuals=diff, mask=mask)


@dataclass
class TargetGrid:
    """Per-tile supervision, row-major (j, i); NaN / -1 mark empty tiles."""

    grid: GridConfig
    c: np.ndarray        # (H, W) bool
    r: np.ndarray        # (H, W)
    phi: np.ndarray      # (H, W)
    dz: np.ndarray       # (H, W)
    lane_id: np.ndarray  # (H, W) int32, -1 when empty

    @classmethod
    def empty(cls, grid: GridConfig) -> "TargetGrid":
        shape = (grid.height_tiles, grid.width_tiles)
        return cls(
            grid=grid,
            c=np.zeros(shape, dtype=bool),
            r=np.full(shape, np.nan),
            phi=np.full(shape, np.nan),
            dz=np.full(shape, np.nan),
            lane_id=np.full(shape, -1, dtype=np.int32),
        )

    def angle_encoding(self, n_bins: int) -> AngleEncoding:
        enc = angle_targets(np.where(self.c, self.phi, 0.0), n_bins)
        return enc

    def to_obj(self) -> dict:
        def cell(value, j, i):
            return value if self.c[j, i] else None

        h, w = self.c.shape
        return {
            "c": self.c.astype(int).tolist(),
            "r": [[cell(float(self.r[j, i]), j, i) for i in range(w)] for j in range(h)],
            "phi": [[cell(float(self.phi[j, i]), j, i) for i in range(w)] for j in range(h)],
            "dz": [[cell(float(self.dz[j, i]), j, i) for i in range(w)] for j in range(h)],
            "lane_id": self.lane_id.tolist(),
        }

    @classmethod
    def from_obj(cls, obj: dict, grid: GridConfig) -> "TargetGrid":
        out = cls.empty(grid)
        out.c = np.asarray(obj["c"], dtype=bool)
        for name in ("r", "phi", "dz"):
            arr = np.array(
                [[np.nan if v is None else v for v in row] for row in obj[name]]
            )
            setattr(out, name, arr)
        out.lane_id = np.asarray(obj["lane_id"], dtype=np.int32)
        return out


@dataclass
class PredictionGrid:
    """Raw per-tile network outputs, row-major (j, i)."""

    grid: GridConfig
    score_logit: np.ndarray    # (H, W)
    r: np.ndarray              # (H, W)
    dz: np.ndarray             # (H, W)
    bin_logits: np.ndarray     # (H, W, N)
    bin_residuals: np.ndarray  # (H, W, N)
    embedding: np.ndarray      # (H, W, D)
    log_var: np.ndarray        # (H, W, 3), order (r, phi, dz)

    @property
    def scores(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.score_logit))

    @property
    def n_bins(self) -> int:
        return self.bin_logits.shape[-1]

    def to_obj(self) -> dict:
        def enc(arr):
            return base64.b64encode(
                np.ascontiguousarray(arr, dtype=np.float64).tobytes()
            ).decode("ascii")

        h, w = self.score_logit.shape
        return {
            "dims": [h, w],
            "n_bins": int(self.bin_logits.shape[-1]),
            "embed_dim": int(self.embedding.shape[-1]),
            "score_logit": enc(self.score_logit),
            "r": enc(self.r),
            "dz": enc(self.dz),
            "bin_logits": enc(self.bin_logits),
            "bin_residuals": enc(self.bin_residuals),
            "embedding": enc(self.embedding),
            "log_var": enc(self.log_var),
        }

    @classmethod
    def from_obj(cls, obj: dict, grid: GridConfig) -> "PredictionGrid":
        h, w = obj["dims"]
        n, d = obj["n_bins"], obj["embed_dim"]

        def dec(key, shape):
            arr = np.frombuffer(base64.b64decode(obj[key]), dtype=np.float64)
            return arr.reshape(shape).copy()

        return cls(
            grid=grid,
            score_logit=dec("score_logit", (h, w)),
            r=dec("r", (h, w)),
            dz=dec("dz", (h, w)),
            bin_logits=dec("bin_logits", (h, w, n)),
            bin_residuals=dec("bin_residuals", (h, w, n)),
            embedding=dec("embedding", (h, w, d)),
            log_var=dec("log_var", (h, w, 3)),
        )


# ── encoding ─────────────────────────────────────────────────────────────

def _clip_segment(p0, p1, xmin, xmax, ymin, ymax):
    """Liang-Barsky: parametric clip of segment p0->p1 to a rectangle."""
    t0, t1 = 0.0, 1.0
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    for p, q in (
        (-dx, p0[0] - xmin),
        (dx, xmax - p0[0]),
        (-dy, p0[1] - ymin),
        (dy, ymax - p0[1]),
    ):
        if p == 0.0:
            if q < 0.0:
                return None
        else:
            t = q / p
            if p < 0.0:
                if t > t1:
                    return None
                if t > t0:
                    t0 = t
            else:
                if t < t0:
                    return None
                if t < t1:
                    t1 = t
    return t0, t1


def _collect_clips(bev_lane: np.ndarray, grid: GridConfig):
    """Yield (j, i, t_global, point3) clip samples of one BEV lane polyline.

    Rects are epsilon-padded so a segment running exactly along a tile
    boundary is not lost to rounding.
    """
    eps = 1e-9
    ox, oy = grid.origin_x, grid.origin_y
    tw, tl = grid.tile_width, grid.tile_length
    w, h = grid.width_tiles, grid.height_tiles
    for k in range(bev_lane.shape[0] - 1):
        p0, p1 = bev_lane[k], bev_lane[k + 1]
        i_lo = int(math.floor((min(p0[0], p1[0]) - ox) / tw))
        i_hi = int(math.floor((max(p0[0], p1[0]) - ox) / tw))
        j_lo = int(math.floor((min(p0[1], p1[1]) - oy) / tl))
        j_hi = int(math.floor((max(p0[1], p1[1]) - oy) / tl))
        for j in range(max(j_lo, 0), min(j_hi, h - 1) + 1):
            y0, y1 = oy + j * tl, oy + (j + 1) * tl
            for i in range(max(i_lo, 0), min(i_hi, w - 1) + 1):
                x0, x1 = ox + i * tw, ox + (i + 1) * tw
                clip = _clip_segment(p0, p1, x0 - eps, x1 + eps, y0 - eps, y1 + eps)
                if clip is None:
                    continue
                for t in clip:
                    yield j, i, k + t, p0 + t * (p1 - p0)


def clip_polyline_to_rect(bev: np.ndarray, xmin, xmax, ymin, ymax) -> np.ndarray:
    """Ordered, deduplicated (M, 3) clip points of a BEV polyline (x, y, z)
    against a rectangle; interior vertices included, heights interpolated."""
    samples = []
    for k in range(bev.shape[0] - 1):
        clip = _clip_segment(bev[k], bev[k + 1], xmin, xmax, ymin, ymax)
        if clip is None:
            continue
        for t in clip:
            xy = bev[k, :2] + t * (bev[k + 1, :2] - bev[k, :2])
            z = bev[k, 2] + t * (bev[k + 1, 2] - bev[k, 2])
            samples.append((k + t, xy[0], xy[1], z))
    samples.sort(key=lambda s: s[0])
    pts = np.array([(x, y, z) for _, x, y, z in samples]).reshape(-1, 3)
    if pts.shape[0] > 1:
        keep = np.concatenate(
            [[True], np.linalg.norm(np.diff(pts[:, :2], axis=0), axis=1) > 1e-9]
        )
        pts = pts[keep]
    return pts


def _fit_tile_line(points: np.ndarray):
    """Total-least-squares line through clipped points ordered along the lane.

    Returns (mean_xy, unit direction oriented with travel) or None when
    the points are degenerate.
    """
    xy = points[:, :2]
    mean = xy.mean(axis=0)
    centered = xy - mean
    if points.shape[0] == 2:
        d = xy[1] - xy[0]
    else:
        cov = centered.T @ centered
        _, vecs = np.linalg.eigh(cov)
        d = vecs[:, -1]
    norm = np.linalg.norm(d)
    if norm < 1e-9:
        return None
    d = d / norm
    travel = xy[-1] - xy[0]
    if d @ travel < 0:
        d = -d
    return mean, d


def _fit_height_at(points: np.ndarray, mean, d, foot) -> float:
    """Height of the clipped points linearly regressed on the along-line
    station, evaluated at the foot's station."""
    s = (points[:, :2] - mean) @ d
    z = points[:, 2]
    s_bar, z_bar = s.mean(), z.mean()
    den = ((s - s_bar) ** 2).sum()
    slope = 0.0 if den < 1e-12 else float(((s - s_bar) * (z - z_bar)).sum() / den)
    s_foot = float((foot - mean) @ d)
    return float(z_bar + slope * (s_foot - s_bar))


def _arc_midpoint(points: np.ndarray) -> np.ndarray:
    """Point at half the cumulative arc length of an ordered 2D polyline."""
    xy = points[:, :2]
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    half = cum[-1] / 2.0
    k = int(np.searchsorted(cum, half)) - 1
    k = max(0, min(k, len(seg) - 1))
    t = 0.0 if seg[k] == 0 else (half - cum[k]) / seg[k]
    return xy[k] + t * (xy[k + 1] - xy[k])


def encode_targets(scene: Scene, grid: GridConfig, pose: CameraPose) -> TargetGrid:
    """Build the per-tile supervision grid for one scene."""
    if not scene.lanes:
        raise ValueError("scene has no lanes")
    targets = TargetGrid.empty(grid)
    centers = geometry.tile_centers(grid)
    lanes_bev = scene.lanes_bev()

    clips: dict[tuple[int, int], dict[int, list]] = {}
    for lane_idx, bev in enumerate(lanes_bev):
        for j, i, t, pt in _collect_clips(bev, grid):
            z = np.interp(t, np.arange(bev.shape[0]), bev[:, 2])
            clips.setdefault((j, i), {}).setdefault(lane_idx, []).append(
                (t, pt[0], pt[1], z)
            )

    for (j, i), by_lane in clips.items():
        center = centers[j, i]
        best = None
        for lane_idx, samples in by_lane.items():
            samples.sort(key=lambda s: s[0])
            pts = np.array([(x, y, z) for _, x, y, z in samples])
            # 1e-8 also swallows the sliver a corner touch leaves behind
            # after the epsilon padding of the clip rects
            keep = np.concatenate(
                [[True], np.linalg.norm(np.diff(pts[:, :2], axis=0), axis=1) > 1e-8]
            )
            pts = pts[keep]
            if pts.shape[0] < MIN_CLIP_POINTS:
                continue
            fit = _fit_tile_line(pts)
            if fit is None:
                continue
            mean, d = fit
            phi = float(wrap_angle(math.atan2(d[1], d[0])))
            normal = np.array([math.sin(phi), -math.cos(phi)])
            r = float((mean - center) @ normal)
            foot = center + r * normal
            if polyline_min_dist(foot[None, :], lanes_bev[lane_idx][:, :2])[0] > MAX_FOOT_DIST:
                continue
            dz = _fit_height_at(pts, mean, d, foot)
            dist = np.linalg.norm(_arc_midpoint(pts) - center)
            if best is None or dist < best[0]:
                best = (dist, lane_idx, r, phi, dz)
        if best is None:
            continue
        _, lane_idx, r, phi, dz = best
        targets.c[j, i] = True
        targets.r[j, i] = r
        targets.phi[j, i] = phi
        targets.dz[j, i] = dz
        targets.lane_id[j, i] = scene.lanes[lane_idx].id
    return targets


# ── decoding ─────────────────────────────────────────────────────────────

@dataclass
class DecodedTile:
    """One above-threshold tile turned back into a 3D lane point."""

    tile: tuple[int, int]          # (j, i)
    score: float
    r: float
    phi: float
    dz: float
    bev_xy: np.ndarray             # (2,) perpendicular foot in BEV
    point: np.ndarray              # (3,) camera frame
    direction: np.ndarray          # (3,) unit, camera frame
    covariance: np.ndarray         # (3, 3) camera frame
    polar_variances: np.ndarray    # (3,) variances of (r, phi, dz)
    embedding: np.ndarray          # (D,)


def decode_tiles(
    preds: PredictionGrid,
    grid: GridConfig,
    pose: CameraPose,
    score_threshold: float = 0.3,
    temperature: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> list[DecodedTile]:
    """Convert every tile with score >= threshold into a 3D point.

    ``temperature`` multiplies the predicted (r, phi, dz) variances
    before covariance propagation; means are never affected.
    """
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError("score_threshold must be in [0, 1]")
    alpha = bin_centers(preds.n_bins)
    centers = geometry.tile_centers(grid)
    scores = preds.scores
    out: list[DecodedTile] = []
    for j, i in np.argwhere(scores >= score_threshold):
        k = int(np.argmax(preds.bin_logits[j, i]))
        phi = float(wrap_angle(alpha[k] + preds.bin_residuals[j, i, k]))
        r = float(preds.r[j, i])
        dz = float(preds.dz[j, i])
        center = centers[j, i]
        var = np.exp(np.clip(preds.log_var[j, i], -60.0, 60.0)) * np.asarray(temperature)
        out.append(
            DecodedTile(
                tile=(int(j), int(i)),
                score=float(scores[j, i]),
                r=r,
                phi=phi,
                dz=dz,
                bev_xy=geometry.segment_foot(r, phi, center),
                point=geometry.segment_to_camera(r, phi, dz, center, pose),
                direction=geometry.segment_direction_camera(phi, pose),
                covariance=geometry.propagate_covariance(
                    var[0], var[1], var[2], r, phi, dz, center, pose
                ),
                polar_variances=var,
                embedding=np.array(preds.embedding[j, i]),
            )
        )
    return out


def targets_to_predictions(
    targets: TargetGrid,
    n_bins: int = 16,
    embed_dim: int = 4,
    lane_embedding_spacing: float = 6.0,
    log_var: float = -50.0,
) -> PredictionGrid:
    """Turn ground-truth targets into the equivalent perfect predictions.

    The oracle for encode->decode roundtrips: occupied tiles get a
    saturated score logit, exact regressands, bin logits matching the
    soft labels and residuals exact on every bin; lanes are separated in
    embedding space along the first axis.
    """
    h, w = targets.c.shape
    enc = targets.angle_encoding(n_bins)
    probs = np.clip(enc.probs, 1e-12, 1.0 - 1e-12)
    bin_logits = np.where(
        enc.probs <= 0.0,
        -_PERFECT_LOGIT,
        np.where(enc.probs >= 1.0, _PERFECT_LOGIT, np.log(probs / (1.0 - probs))),
    )
    embedding = np.zeros((h, w, embed_dim))
    embedding[:, :, 0] = np.where(targets.lane_id >= 0, targets.lane_id, 0) * (
        lane_embedding_spacing
    )
    return PredictionGrid(
        grid=targets.grid,
        score_logit=np.where(targets.c, _PERFECT_LOGIT, -_PERFECT_LOGIT),
        r=np.where(targets.c, np.nan_to_num(targets.r), 0.0),
        dz=np.where(targets.c, np.nan_to_num(targets.dz), 0.0),
        bin_logits=bin_logits,
        bin_residuals=enc.residuals,
        embedding=embedding,
        log_var=np.full((h, w, 3), log_var),
    )
