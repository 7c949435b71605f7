"""Grouping decoded tiles into lane instances.

Two routes: mean-shift over the learned embeddings with a radius-based
member assignment (the trained path), and a greedy geometric baseline
that chains tiles by continuity heuristics.  Clusters are ordered into
directed polylines by a nearest-neighbour walk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import mean_shift_iterate
from .geometry import wrap_angle
from .tilecodec import DecodedTile

MIN_CLUSTER_SIZE = 2


@dataclass
class LaneDetection:
    """One detected lane: ordered 3D points with uncertainty.

    ``params`` and ``variances`` keep the per-tile polar predictions
    (r, phi, dz) and their variances, aligned with ``member_tiles``, so
    covariances can be re-propagated after temperature scaling.
    """

    points: np.ndarray             # (P, 3) camera frame, chained order
    directions: np.ndarray         # (P, 3) unit vectors, consistent along chain
    covariances: np.ndarray        # (P, 3, 3)
    bev: np.ndarray                # (P, 2) BEV feet
    score: float                   # mean member tile score
    member_tiles: list = field(default_factory=list)   # [(j, i), ...]
    params: np.ndarray | None = None      # (P, 3) predicted (r, phi, dz)
    variances: np.ndarray | None = None   # (P, 3) predicted variances

    def to_obj(self) -> dict:
        return {
            "score": self.score,
            "points": self.points.tolist(),
            "directions": self.directions.tolist(),
            "covariances": self.covariances.tolist(),
            "bev": self.bev.tolist(),
            "member_tiles": [list(t) for t in self.member_tiles],
            "params": None if self.params is None else self.params.tolist(),
            "variances": None if self.variances is None else self.variances.tolist(),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "LaneDetection":
        return cls(
            points=np.asarray(obj["points"], dtype=np.float64),
            directions=np.asarray(obj["directions"], dtype=np.float64),
            covariances=np.asarray(obj["covariances"], dtype=np.float64),
            bev=np.asarray(obj["bev"], dtype=np.float64),
            score=float(obj["score"]),
            member_tiles=[tuple(t) for t in obj["member_tiles"]],
            params=None if obj.get("params") is None else np.asarray(obj["params"]),
            variances=None
            if obj.get("variances") is None
            else np.asarray(obj["variances"]),
        )


def mean_shift(
    embeddings, bandwidth: float, max_iters: int = 200, tol: float = 1e-4
) -> np.ndarray:
    """Flat-kernel mean-shift mode finding.

    Returns the deduplicated (M, D) mode array; modes closer than
    bandwidth/2 are merged (averaged).
    """
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("need at least one embedding")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    converged = mean_shift_iterate(x, bandwidth, max_iters, tol)
    groups: list[list[int]] = []
    seeds: list[np.ndarray] = []
    for k in range(converged.shape[0]):
        for g, seed in enumerate(seeds):
            if np.linalg.norm(converged[k] - seed) < bandwidth / 2.0:
                groups[g].append(k)
                break
        else:
            groups.append([k])
            seeds.append(converged[k])
    return np.stack([converged[g].mean(axis=0) for g in groups])


def cluster_tiles(
    tiles: list[DecodedTile], delta_push: float = 3.0
) -> list[list[DecodedTile]]:
    """Assign tiles to mean-shift modes within delta_push/2 in embedding
    space; tiles farther from every mode are discarded, clusters smaller
    than MIN_CLUSTER_SIZE dropped."""
    if not tiles:
        raise ValueError("no decoded tiles to cluster")
    radius = delta_push / 2.0
    emb = np.stack([t.embedding for t in tiles])
    modes = mean_shift(emb, bandwidth=radius)
    dist = np.linalg.norm(emb[:, None, :] - modes[None, :, :], axis=2)
    nearest = np.argmin(dist, axis=1)
    clusters: list[list[DecodedTile]] = [[] for _ in range(modes.shape[0])]
    for k, tile in enumerate(tiles):
        if dist[k, nearest[k]] < radius:
            clusters[nearest[k]].append(tile)
    return [c for c in clusters if len(c) >= MIN_CLUSTER_SIZE]


def greedy_cluster(
    tiles: list[DecodedTile],
    max_gap: float = 3.3,
    max_angle_deg: float = 30.0,
) -> list[list[DecodedTile]]:
    """Geometric baseline: grow chains from the highest-score tile,
    attaching the nearest unassigned tile within max_gap of either chain
    end whose direction agrees within max_angle_deg.

    max_gap defaults to 1.1x the tile pitch: a strict one-tile-length
    gate can never connect an axis-aligned column whose feet sit exactly
    tile_length apart, while typical lane spacing (~3.7 m) must stay
    disconnected.
    """
    if not tiles:
        raise ValueError("no decoded tiles to cluster")
    max_angle = math.radians(max_angle_deg)
    unassigned = list(range(len(tiles)))
    pos = np.stack([t.bev_xy for t in tiles])
    phi = np.array([t.phi for t in tiles])
    scores = np.array([t.score for t in tiles])

    clusters: list[list[DecodedTile]] = []
    while unassigned:
        seed = max(unassigned, key=lambda k: (scores[k], -k))
        unassigned.remove(seed)
        chain = [seed]
        while True:
            attach = None
            best_d = max_gap
            for end_idx, end in ((0, chain[0]), (-1, chain[-1])):
                for k in unassigned:
                    d = float(np.linalg.norm(pos[k] - pos[end]))
                    if d >= best_d:
                        continue
                    if abs(wrap_angle(phi[k] - phi[end])) >= max_angle:
                        continue
                    attach, best_d = (end_idx, k), d
            if attach is None:
                break
            end_idx, k = attach
            unassigned.remove(k)
            if end_idx == 0:
                chain.insert(0, k)
            else:
                chain.append(k)
        clusters.append([tiles[k] for k in chain])
    return [c for c in clusters if len(c) >= MIN_CLUSTER_SIZE]


def order_points(cluster: list[DecodedTile]) -> LaneDetection:
    """Chain a cluster's tiles into an ordered lane detection.

    The walk starts from the point with minimal projection onto the
    cluster's principal BEV direction and repeatedly hops to the nearest
    remaining point; direction vectors are flipped to point along the
    chain.
    """
    if len(cluster) < 2:
        raise ValueError("cluster needs at least 2 points")
    bev = np.stack([t.bev_xy for t in cluster])
    centered = bev - bev.mean(axis=0)
    if np.linalg.norm(centered, axis=1).max() < 1e-9:
        raise ValueError("degenerate cluster: all points coincident")
    _, vecs = np.linalg.eigh(centered.T @ centered)
    principal = vecs[:, -1]

    remaining = list(range(len(cluster)))
    current = min(remaining, key=lambda k: float(bev[k] @ principal))
    order = [current]
    remaining.remove(current)
    while remaining:
        nxt = min(remaining, key=lambda k: float(np.linalg.norm(bev[k] - bev[current])))
        remaining.remove(nxt)
        order.append(nxt)
        current = nxt

    pts = np.stack([cluster[k].point for k in order])
    dirs = np.stack([cluster[k].direction for k in order])
    bev_ordered = bev[order]
    steps = np.diff(bev_ordered, axis=0)
    for k in range(len(order)):
        step = steps[min(k, len(steps) - 1)]
        d_bev = np.array([math.cos(cluster[order[k]].phi), math.sin(cluster[order[k]].phi)])
        if float(d_bev @ step) < 0:
            dirs[k] = -dirs[k]

    return LaneDetection(
        points=pts,
        directions=dirs,
        covariances=np.stack([cluster[k].covariance for k in order]),
        bev=bev_ordered,
        score=float(np.mean([cluster[k].score for k in order])),
        member_tiles=[cluster[k].tile for k in order],
        params=np.array([[cluster[k].r, cluster[k].phi, cluster[k].dz] for k in order]),
        variances=np.stack([cluster[k].polar_variances for k in order]),
    )


def detect_lanes(
    tiles: list[DecodedTile],
    method: str = "embedding",
    delta_push: float = 3.0,
    max_gap: float = 3.3,
) -> list[LaneDetection]:
    """Cluster decoded tiles and order each cluster into a lane."""
    if not tiles:
        return []
    if method == "embedding":
        clusters = cluster_tiles(tiles, delta_push)
    elif method == "greedy":
        clusters = greedy_cluster(tiles, max_gap=max_gap)
    else:
        raise ValueError(f"unknown clustering method {method!r}")
    lanes = []
    for cluster in clusters:
        try:
            lanes.append(order_points(cluster))
        except ValueError:
            continue
    return lanes
