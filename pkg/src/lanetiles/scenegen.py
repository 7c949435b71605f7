"""Procedural ground-truth road scenes and noisy BEV observation rasters.

Scenes are built analytically in the BEV frame (lanes as lateral-offset
cubics of a base centerline, draped over a low-frequency sinusoidal
surface) and then rotated into the camera frame, so every lane point
satisfies z_bev = surface(x, y) exactly by construction.

Dataset files are JSON Lines: an optional header object first, then one
scene object per line:

    {"seed": int, "topology": str,
     "pose": {"pitch": float, "height": float},
     "surface": {"amplitudes": [...], "wavelengths": [...],
                 "phases": [...], "directions": [...]},
     "lanes": [{"id": int, "points": [[x, y, z], ...]}, ...],
     "raster": {"dims": [rows, cols], "evidence": b64-float32,
                "heights": b64-float32}}

Raster arrays are row-major float32, base64-encoded; points are in the
camera frame, metres.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import polyline_min_dist
from .geometry import CameraPose, GridConfig, camera_to_bev, bev_to_camera

TOPOLOGIES = ("parallel", "split", "merge", "short-start", "perpendicular", "curve")

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SurfaceParams:
    """Road surface height: sum of K low-frequency plane waves."""

    amplitudes: tuple[float, ...]
    wavelengths: tuple[float, ...]
    phases: tuple[float, ...]
    directions: tuple[float, ...]

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        z = np.zeros(np.broadcast(x, y).shape)
        for a, lam, ph, th in zip(
            self.amplitudes, self.wavelengths, self.phases, self.directions
        ):
            z = z + a * np.sin(TWO_PI * (x * math.cos(th) + y * math.sin(th)) / lam + ph)
        return z


@dataclass
class Lane3D:
    """One directed lane polyline in the camera frame."""

    id: int
    points: np.ndarray  # (N, 3), N >= 2, ordered by arc length

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 2 or self.points.shape[1] != 3:
            raise ValueError("lane needs at least 2 points of dimension 3")


@dataclass
class Scene:
    seed: int
    topology: str
    pose: CameraPose
    surface: SurfaceParams
    lanes: list[Lane3D]

    def lanes_bev(self) -> list[np.ndarray]:
        """Lane polylines projected to the BEV frame, (N, 3) each."""
        return [camera_to_bev(lane.points, self.pose) for lane in self.lanes]


@dataclass
class ObservationRaster:
    """Fine evidence/height grid the toy predictor consumes."""

    evidence: np.ndarray  # (rows, cols) in [0, 1]
    heights: np.ndarray  # (rows, cols), metres above the BEV plane


@dataclass(frozen=True)
class NoiseConfig:
    paint_radius: float = 0.4
    dropout: float = 0.1
    jitter_m: float = 0.05
    height_noise_m: float = 0.02
    occlusion_max: int = 2
    occlusion_width: tuple[float, float] = (1.0, 4.0)
    occlusion_length: tuple[float, float] = (3.0, 10.0)

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(dropout=0.0, jitter_m=0.0, height_noise_m=0.0, occlusion_max=0)


@dataclass(frozen=True)
class SceneGenConfig:
    topology: str | None = None
    topology_weights: tuple[float, ...] = (0.3, 0.15, 0.15, 0.15, 0.1, 0.15)
    n_lanes_min: int = 2
    n_lanes_max: int = 5
    lane_spacing: float = 3.7
    spacing_jitter: float = 0.3
    drift_linear_max: float = 2.5
    drift_quad_max: float = 1.5
    max_curvature: float = 0.012
    x_span: float = 8.0
    y_start_range: tuple[float, float] = (-2.0, 0.0)
    y_end: float = 80.0
    short_start_min: float = 20.0
    sample_step: float = 1.0
    n_surface_waves: int = 2
    surface_amplitude_max: float = 1.0
    surface_wavelength_range: tuple[float, float] = (50.0, 120.0)
    pitch_range: tuple[float, float] = (0.0, 0.05)
    height_range: tuple[float, float] = (1.3, 1.7)

    def __post_init__(self):
        if self.topology is not None and self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        if len(self.topology_weights) != len(TOPOLOGIES):
            raise ValueError("topology_weights must have one entry per topology")
        if self.lane_spacing <= 0 or self.sample_step <= 0:
            raise ValueError("lane_spacing and sample_step must be positive")
        if not (
            math.isfinite(self.max_curvature)
            and math.isfinite(self.drift_linear_max)
            and math.isfinite(self.drift_quad_max)
        ):
            raise ValueError("curvature and drift bounds must be finite")
        if not 1 <= self.n_lanes_min <= self.n_lanes_max:
            raise ValueError("invalid lane count range")


class _Cubic:
    """x(y) = c0 + c1 t + c2 t^2 + c3 t^3 with t = y - y_ref."""

    def __init__(self, y_ref: float, coeffs: tuple[float, float, float, float]):
        self.y_ref = y_ref
        self.coeffs = coeffs

    def __call__(self, y: float) -> float:
        t = y - self.y_ref
        c0, c1, c2, c3 = self.coeffs
        return c0 + t * (c1 + t * (c2 + t * c3))

    def slope(self, y: float) -> float:
        t = y - self.y_ref
        _, c1, c2, c3 = self.coeffs
        return c1 + t * (2.0 * c2 + t * 3.0 * c3)


def _smoothstep(u: float) -> float:
    u = min(max(u, 0.0), 1.0)
    return u * u * (3.0 - 2.0 * u)


def _march(fx, slope, y0: float, y1: float, step: float) -> np.ndarray:
    """Sample x(y) at ~step arc-length increments, endpoints included."""
    ys = [y0]
    while True:
        y = ys[-1] + step / math.hypot(1.0, slope(ys[-1]))
        if y >= y1:
            break
        ys.append(y)
    if y1 - ys[-1] > 1e-9:
        ys.append(y1)
    ys_arr = np.array(ys)
    xs = np.array([fx(y) for y in ys_arr])
    return np.column_stack([xs, ys_arr])


def _sample_surface(cfg: SceneGenConfig, rng: np.random.Generator) -> SurfaceParams:
    k = cfg.n_surface_waves
    return SurfaceParams(
        amplitudes=tuple(rng.uniform(0.0, cfg.surface_amplitude_max, k)),
        wavelengths=tuple(rng.uniform(*cfg.surface_wavelength_range, k)),
        phases=tuple(rng.uniform(0.0, TWO_PI, k)),
        directions=tuple(rng.uniform(0.0, TWO_PI, k)),
    )


def _base_cubic(cfg: SceneGenConfig, rng: np.random.Generator, curve: bool) -> _Cubic:
    """Base centerline.  Mild topologies bound the total lateral drift
    across the grid; the curve topology samples a real curvature (those
    lanes bend out of coverage, which is the point)."""
    y0 = rng.uniform(*cfg.y_start_range)
    span = max(cfg.y_end - y0, 1.0)
    c0 = rng.uniform(-0.4, 0.4) * cfg.x_span
    c1 = rng.uniform(-1.0, 1.0) * cfg.drift_linear_max / span
    if curve:
        c2 = rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 0.5) * cfg.max_curvature
        c3 = 0.0
    else:
        c2 = rng.uniform(-1.0, 1.0) * cfg.drift_quad_max / span**2
        c3 = rng.uniform(-0.3, 0.3) * cfg.drift_quad_max / span**3
    return _Cubic(y0, (c0, c1, c2, c3))


def _lane_offsets(cfg: SceneGenConfig, rng: np.random.Generator, n: int) -> list[float]:
    offs = (np.arange(n) - (n - 1) / 2.0) * cfg.lane_spacing
    offs = offs + rng.uniform(-cfg.spacing_jitter, cfg.spacing_jitter, n)
    return [float(o) for o in offs]


def generate_scene(config: SceneGenConfig, seed: int) -> Scene:
    """Deterministically generate one ground-truth scene."""
    rng = np.random.default_rng(seed)
    topology = config.topology
    if topology is None:
        w = np.asarray(config.topology_weights, dtype=np.float64)
        topology = str(rng.choice(TOPOLOGIES, p=w / w.sum()))

    pose = CameraPose(
        pitch=float(rng.uniform(*config.pitch_range)),
        height=float(rng.uniform(*config.height_range)),
    )
    surface = _sample_surface(config, rng)

    base = _base_cubic(config, rng, curve=topology == "curve")
    n_lanes = int(rng.integers(config.n_lanes_min, config.n_lanes_max + 1))
    offsets = _lane_offsets(config, rng, n_lanes)
    y0, y1 = base.y_ref, config.y_end

    polylines: list[np.ndarray] = []
    for off in offsets:
        polylines.append(
            _march(lambda y, o=off: base(y) + o, base.slope, y0, y1, config.sample_step)
        )

    if topology in ("split", "merge"):
        parent_idx = int(rng.integers(0, n_lanes))
        parent = polylines[parent_idx]
        parent_off = offsets[parent_idx]
        side = float(rng.choice([-1.0, 1.0]))
        d = side * rng.uniform(0.8, 1.2) * config.lane_spacing
        ramp_len = rng.uniform(25.0, 40.0)
        if topology == "split":
            # branch starts exactly on a parent sample and diverges
            k = int(np.searchsorted(parent[:, 1], rng.uniform(10.0, 30.0)))
            k = min(k, parent.shape[0] - 5)
            y_s = float(parent[k, 1])
            branch = _march(
                lambda y: base(y) + parent_off + d * _smoothstep((y - y_s) / ramp_len),
                base.slope,
                y_s,
                y1,
                config.sample_step,
            )
            branch[0] = parent[k]
        else:
            # branch converges onto a parent sample and ends there
            k = int(np.searchsorted(parent[:, 1], rng.uniform(35.0, 55.0)))
            k = min(k, parent.shape[0] - 2)
            y_m = float(parent[k, 1])
            branch = _march(
                lambda y: base(y) + parent_off + d * _smoothstep((y_m - y) / ramp_len),
                base.slope,
                max(y0, y_m - 2.2 * ramp_len),
                y_m,
                config.sample_step,
            )
            branch[-1] = parent[k]
        polylines.append(branch)

    if topology == "short-start":
        idx = int(rng.integers(0, len(polylines)))
        y_s = rng.uniform(config.short_start_min, config.short_start_min + 25.0)
        lane = polylines[idx]
        polylines[idx] = lane[lane[:, 1] >= y_s]
        if polylines[idx].shape[0] < 2:
            polylines[idx] = lane[-2:]

    if topology == "perpendicular":
        y_c = rng.uniform(15.0, 55.0)
        c1 = rng.uniform(-0.05, 0.05)
        cross = _Cubic(0.0, (y_c, c1, 0.0, 0.0))
        pts = _march(cross, cross.slope, -config.x_span * 1.2, config.x_span * 1.2,
                     config.sample_step)
        # marched as y(x): swap columns back to (x, y)
        pts = pts[:, ::-1].copy()
        if rng.random() < 0.5:
            pts = pts[::-1].copy()
        polylines.append(pts)

    lanes = []
    for lane_id, xy in enumerate(polylines):
        z = surface.height(xy[:, 0], xy[:, 1])
        bev = np.column_stack([xy, z])
        lanes.append(Lane3D(id=lane_id, points=bev_to_camera(bev, pose)))
    return Scene(seed=seed, topology=topology, pose=pose, surface=surface, lanes=lanes)


# ── observation raster ───────────────────────────────────────────────────

def raster_cell_centers(grid: GridConfig, factor: int = 4) -> np.ndarray:
    """(rows, cols, 2) BEV centers of the fine observation cells."""
    rows, cols = grid.height_tiles * factor, grid.width_tiles * factor
    xs = grid.origin_x + (np.arange(cols) + 0.5) * (grid.tile_width / factor)
    ys = grid.origin_y + (np.arange(rows) + 0.5) * (grid.tile_length / factor)
    out = np.empty((rows, cols, 2))
    out[:, :, 0] = xs[None, :]
    out[:, :, 1] = ys[:, None]
    return out


def rasterize_observations(
    scene: Scene,
    grid: GridConfig,
    noise: NoiseConfig,
    seed: int,
    factor: int = 4,
) -> ObservationRaster:
    """Paint noisy lane evidence and surface heights on the fine grid."""
    rng = np.random.default_rng(seed)
    centers = raster_cell_centers(grid, factor)
    rows, cols = centers.shape[:2]
    flat = centers.reshape(-1, 2)

    painted = np.zeros(rows * cols, dtype=bool)
    for bev in scene.lanes_bev():
        xy = bev[:, :2]
        if noise.jitter_m > 0:
            xy = xy + rng.normal(0.0, noise.jitter_m, xy.shape)
        painted |= polyline_min_dist(flat, xy) <= noise.paint_radius
    evidence = painted.astype(np.float64)

    if noise.dropout > 0:
        keep = rng.random(rows * cols) >= noise.dropout
        evidence *= keep

    evidence = evidence.reshape(rows, cols)
    if noise.occlusion_max > 0:
        for _ in range(int(rng.integers(0, noise.occlusion_max + 1))):
            w = rng.uniform(*noise.occlusion_width)
            h = rng.uniform(*noise.occlusion_length)
            x0 = rng.uniform(grid.origin_x, grid.origin_x + grid.bev_width - w)
            y0 = rng.uniform(grid.origin_y, grid.origin_y + grid.bev_length - h)
            inside = (
                (centers[:, :, 0] >= x0)
                & (centers[:, :, 0] <= x0 + w)
                & (centers[:, :, 1] >= y0)
                & (centers[:, :, 1] <= y0 + h)
            )
            evidence[inside] = 0.0

    heights = scene.surface.height(centers[:, :, 0], centers[:, :, 1])
    if noise.height_noise_m > 0:
        heights = heights + rng.normal(0.0, noise.height_noise_m, heights.shape)
    return ObservationRaster(evidence=evidence, heights=heights)


# ── JSON-Lines serialization ─────────────────────────────────────────────

def _encode_f32(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=np.float32).tobytes()).decode(
        "ascii"
    )


def _decode_f32(data: str, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(data), dtype=np.float32).astype(np.float64)
    return arr.reshape(shape)


def scene_to_obj(scene: Scene, raster: ObservationRaster | None = None) -> dict:
    obj = {
        "seed": scene.seed,
        "topology": scene.topology,
        "pose": {"pitch": scene.pose.pitch, "height": scene.pose.height},
        "surface": {
            "amplitudes": list(scene.surface.amplitudes),
            "wavelengths": list(scene.surface.wavelengths),
            "phases": list(scene.surface.phases),
            "directions": list(scene.surface.directions),
        },
        "lanes": [
            {"id": lane.id, "points": lane.points.tolist()} for lane in scene.lanes
        ],
    }
    if raster is not None:
        obj["raster"] = {
            "dims": list(raster.evidence.shape),
            "evidence": _encode_f32(raster.evidence),
            "heights": _encode_f32(raster.heights),
        }
    return obj


def scene_from_obj(obj: dict) -> tuple[Scene, ObservationRaster | None]:
    surface = SurfaceParams(
        amplitudes=tuple(obj["surface"]["amplitudes"]),
        wavelengths=tuple(obj["surface"]["wavelengths"]),
        phases=tuple(obj["surface"]["phases"]),
        directions=tuple(obj["surface"]["directions"]),
    )
    scene = Scene(
        seed=int(obj["seed"]),
        topology=obj["topology"],
        pose=CameraPose(obj["pose"]["pitch"], obj["pose"]["height"]),
        surface=surface,
        lanes=[
            Lane3D(id=int(l["id"]), points=np.asarray(l["points"], dtype=np.float64))
            for l in obj["lanes"]
        ],
    )
    raster = None
    if "raster" in obj:
        dims = tuple(obj["raster"]["dims"])
        raster = ObservationRaster(
            evidence=_decode_f32(obj["raster"]["evidence"], dims),
            heights=_decode_f32(obj["raster"]["heights"], dims),
        )
    return scene, raster


def dataset_write(path, items, header: dict | None = None) -> None:
    """Write (scene, raster) pairs as JSON Lines, optional header first."""
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        for scene, raster in items:
            fh.write(json.dumps(scene_to_obj(scene, raster), sort_keys=True) + "\n")


def dataset_read(path) -> tuple[dict, list[tuple[Scene, ObservationRaster | None]]]:
    """Read a dataset file; returns (header, items). Header may be {}."""
    header: dict = {}
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "lanes" not in obj:
                header = obj
                continue
            items.append(scene_from_obj(obj))
    return header, items


# raster seeds are offset from scene seeds so the two streams differ
_RASTER_SEED_OFFSET = 500_009


def generate_dataset(
    config: SceneGenConfig,
    grid: GridConfig,
    noise: NoiseConfig,
    n_scenes: int,
    seed_base: int,
    factor: int = 4,
):
    """Yield (scene, raster) pairs for seeds seed_base..seed_base+n-1."""
    for i in range(n_scenes):
        seed = seed_base + i
        scene = generate_scene(config, seed)
        raster = rasterize_observations(
            scene, grid, noise, seed + _RASTER_SEED_OFFSET, factor
        )
        yield scene, raster
