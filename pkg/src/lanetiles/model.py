"""Per-tile predictor with hand-derived backpropagation and training.

A two-layer perceptron with shared weights runs on a (4k+1)x(4k+1)
patch of the observation raster (evidence + height channels) around each
tile and emits every head the representation needs: occupancy logit,
lateral/height offsets, angle bin logits and residuals, the clustering
embedding, and per-parameter log-variances.

Training is two-staged: stage "means" minimises the grid objective plus
the push-pull embedding loss; stage "uncertainty" freezes everything but
the log-variance head and fits the Gaussian NLL against squared errors
collected either in global curve context or tile-locally.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import clustering, losses, tilecodec, uncertainty
from .geometry import GridConfig, tile_centers
from .scenegen import ObservationRaster, Scene
from .tilecodec import PredictionGrid, TargetGrid

CHECKPOINT_VERSION = "lanetiles-ckpt/v1"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good_loss: float):
        super().__init__(
            f"loss became non-finite at step {step}; last good loss {last_good_loss:.6g}"
        )
        self.step = step
        self.last_good_loss = last_good_loss


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 64
    embed_dim: int = 4
    n_bins: int = 16
    patch_k: int = 2
    raster_factor: int = 4
    lr_stage1: float = 1e-3
    steps_stage1: int = 7000
    lr_decay: float = 0.2
    lr_decay_at: float = 0.75
    lr_stage2: float = 5e-3
    steps_stage2: int = 1500
    batch_size: int = 8
    embedding_weight: float = 30.0
    delta_pull: float = 0.1
    delta_push: float = 3.0
    score_threshold: float = 0.3
    uncertainty_supervision: str = "global"
    assoc_threshold: float = 1.0
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    log_every: int = 50

    @property
    def patch_side(self) -> int:
        return 4 * self.patch_k + 1

    @property
    def input_dim(self) -> int:
        # evidence + height windows plus the normalized tile position;
        # without the position features a shared-weight local predictor
        # cannot give identical-looking parallel lanes distinct embeddings
        return 2 * self.patch_side**2 + 2

    @property
    def output_dim(self) -> int:
        return 3 + 2 * self.n_bins + self.embed_dim + 3

    def head_slices(self) -> dict[str, slice]:
        n, d = self.n_bins, self.embed_dim
        return {
            "score_logit": slice(0, 1),
            "r": slice(1, 2),
            "dz": slice(2, 3),
            "bin_logits": slice(3, 3 + n),
            "bin_residuals": slice(3 + n, 3 + 2 * n),
            "embedding": slice(3 + 2 * n, 3 + 2 * n + d),
            "log_var": slice(3 + 2 * n + d, 3 + 2 * n + d + 3),
        }


@dataclass
class ToyPredictor:
    cfg: TrainConfig
    w1: np.ndarray  # (input_dim, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, output_dim)
    b2: np.ndarray  # (output_dim,)

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_model(cfg: TrainConfig, seed: int) -> ToyPredictor:
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / math.sqrt(cfg.input_dim), (cfg.input_dim, cfg.hidden))
    w2 = rng.normal(0.0, 0.1 / math.sqrt(cfg.hidden), (cfg.hidden, cfg.output_dim))
    return ToyPredictor(cfg=cfg, w1=w1, b1=np.zeros(cfg.hidden), w2=w2,
                        b2=np.zeros(cfg.output_dim))


def extract_patches(raster: ObservationRaster, grid: GridConfig, cfg: TrainConfig) -> np.ndarray:
    """(W*H, input_dim) per-tile input patches, row-major (j, i) tiles.

    Each tile reads the (4k+1)^2 window of evidence and height cells
    centred on its centre cell; edges are zero-padded.
    """
    f = cfg.raster_factor
    rows, cols = raster.evidence.shape
    if rows != grid.height_tiles * f or cols != grid.width_tiles * f:
        raise ValueError(
            f"raster {rows}x{cols} inconsistent with grid "
            f"{grid.height_tiles * f}x{grid.width_tiles * f}"
        )
    half = cfg.patch_side // 2
    cj = np.arange(grid.height_tiles) * f + f // 2
    ci = np.arange(grid.width_tiles) * f + f // 2
    channels = []
    for plane in (raster.evidence, raster.heights):
        padded = np.pad(np.asarray(plane, dtype=np.float64), half)
        windows = np.lib.stride_tricks.sliding_window_view(
            padded, (cfg.patch_side, cfg.patch_side)
        )
        channels.append(windows[cj[:, None], ci[None, :]])
    centers = tile_centers(grid)
    pos = np.stack(
        [
            centers[:, :, 0] / (grid.bev_width / 2.0),
            centers[:, :, 1] / grid.bev_length,
        ],
        axis=-1,
    )
    patches = np.concatenate(
        [c.reshape(grid.height_tiles * grid.width_tiles, -1) for c in channels]
        + [pos.reshape(-1, 2)],
        axis=1,
    )
    return patches


def forward(model: ToyPredictor, patches: np.ndarray):
    """Returns (outputs (T, output_dim), hidden activations (T, hidden))."""
    hidden = np.tanh(patches @ model.w1 + model.b1)
    return hidden @ model.w2 + model.b2, hidden


def outputs_to_predictions(
    outputs: np.ndarray, grid: GridConfig, cfg: TrainConfig
) -> PredictionGrid:
    h, w = grid.height_tiles, grid.width_tiles
    sl = cfg.head_slices()

    def grab(name, extra=()):
        return outputs[:, sl[name]].reshape((h, w) + tuple(extra)) if extra else (
            outputs[:, sl[name]].reshape(h, w)
        )

    return PredictionGrid(
        grid=grid,
        score_logit=grab("score_logit"),
        r=grab("r"),
        dz=grab("dz"),
        bin_logits=grab("bin_logits", (cfg.n_bins,)),
        bin_residuals=grab("bin_residuals", (cfg.n_bins,)),
        embedding=grab("embedding", (cfg.embed_dim,)),
        log_var=grab("log_var", (3,)),
    )


def predict(model: ToyPredictor, raster: ObservationRaster, grid: GridConfig) -> PredictionGrid:
    patches = extract_patches(raster, grid, model.cfg)
    outputs, _ = forward(model, patches)
    return outputs_to_predictions(outputs, grid, model.cfg)


def backward(
    model: ToyPredictor, patches: np.ndarray, hidden: np.ndarray, grad_out: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact gradients of the summed loss w.r.t. all weights, given the
    per-output upstream gradients from the losses."""
    grad_w2 = hidden.T @ grad_out
    grad_b2 = grad_out.sum(axis=0)
    grad_hidden = grad_out @ model.w2.T
    grad_pre = grad_hidden * (1.0 - hidden**2)
    return {
        "w1": patches.T @ grad_pre,
        "b1": grad_pre.sum(axis=0),
        "w2": grad_w2,
        "b2": grad_b2,
    }


def grid_grads_to_outputs(grads: dict, grid: GridConfig, cfg: TrainConfig) -> np.ndarray:
    """Assemble per-head loss gradients into the (T, output_dim) layout."""
    t = grid.height_tiles * grid.width_tiles
    out = np.zeros((t, cfg.output_dim))
    sl = cfg.head_slices()
    for name, g in grads.items():
        out[:, sl[name]] = g.reshape(t, -1)
    return out


@dataclass
class SceneBatch:
    """Precomputed per-scene training inputs."""

    patches: np.ndarray
    targets: TargetGrid
    scene: Scene


def scene_loss_and_grads(
    model: ToyPredictor, item: SceneBatch, grid: GridConfig, cfg: TrainConfig
):
    """Stage-1 objective for one scene: tiles loss + weighted embedding loss."""
    outputs, hidden = forward(model, item.patches)
    preds = outputs_to_predictions(outputs, grid, cfg)
    tile_out = losses.tiles_loss(preds, item.targets)
    value = tile_out.value
    grads = dict(tile_out.grads)
    occ = item.targets.c
    if occ.any():
        emb_out = losses.embedding_loss(
            preds.embedding[occ],
            item.targets.lane_id[occ],
            delta_pull=cfg.delta_pull,
            delta_push=cfg.delta_push,
        )
        value += cfg.embedding_weight * emb_out.value
        grad_emb = np.zeros_like(preds.embedding)
        grad_emb[occ] = cfg.embedding_weight * emb_out.grads["embedding"]
        grads["embedding"] = grad_emb
    grad_out = grid_grads_to_outputs(grads, grid, cfg)
    return value, backward(model, item.patches, hidden, grad_out)


class _RmsProp:
    """Momentum-free adaptive update with per-weight step scaling."""

    def __init__(self, params: dict[str, np.ndarray], decay: float, eps: float):
        self.state = {k: np.zeros_like(v) for k, v in params.items()}
        self.decay = decay
        self.eps = eps

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        for k, p in params.items():
            g = grads[k]
            self.state[k] = self.decay * self.state[k] + (1.0 - self.decay) * g * g
            p -= lr * g / (np.sqrt(self.state[k]) + self.eps)


def prepare_scenes(items, grid: GridConfig, cfg: TrainConfig) -> list[SceneBatch]:
    batches = []
    for scene, raster in items:
        if raster is None:
            raise ValueError(f"scene seed {scene.seed} has no observation raster")
        batches.append(
            SceneBatch(
                patches=extract_patches(raster, grid, cfg),
                targets=tilecodec.encode_targets(scene, grid, scene.pose),
                scene=scene,
            )
        )
    return batches


def train_means(
    items,
    grid: GridConfig,
    cfg: TrainConfig,
    seed: int,
) -> tuple[ToyPredictor, list[dict]]:
    """Stage 1: fit all mean heads and the embedding on (scene, raster) pairs."""
    if not items:
        raise ValueError("empty training dataset")
    data = prepare_scenes(items, grid, cfg)
    model = init_model(cfg, seed)
    opt = _RmsProp(model.params(), cfg.rmsprop_decay, cfg.rmsprop_eps)
    rng = np.random.default_rng(seed + 1)
    log: list[dict] = []
    last_good = math.inf
    for step in range(cfg.steps_stage1):
        idx = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
        total = 0.0
        grads = {k: np.zeros_like(v) for k, v in model.params().items()}
        for k in idx:
            value, g = scene_loss_and_grads(model, data[k], grid, cfg)
            total += value
            for name in grads:
                grads[name] += g[name]
        n = float(len(idx))
        total /= n
        for name in grads:
            grads[name] /= n
        if not math.isfinite(total):
            raise TrainingDiverged(step, last_good)
        last_good = total
        lr = cfg.lr_stage1
        if step >= cfg.lr_decay_at * cfg.steps_stage1:
            lr *= cfg.lr_decay
        opt.step(model.params(), grads, lr)
        if step % cfg.log_every == 0 or step == cfg.steps_stage1 - 1:
            log.append({"stage": "means", "step": step, "loss": total})
    return model, log


def _collect_se_tiles(
    model: ToyPredictor, data: list[SceneBatch], grid: GridConfig, cfg: TrainConfig
) -> list[np.ndarray]:
    """Per scene: (n_records, 4) arrays of (flat tile index, se_r, se_phi, se_dz).

    With the mean heads frozen these are constants of stage 2, so they
    are computed once up front.
    """
    per_scene = []
    for item in data:
        outputs, _ = forward(model, item.patches)
        preds = outputs_to_predictions(outputs, grid, cfg)
        if cfg.uncertainty_supervision == "tile":
            records = uncertainty.tile_local_se(preds, item.targets)
        elif cfg.uncertainty_supervision == "global":
            tiles = tilecodec.decode_tiles(
                preds, grid, item.scene.pose, cfg.score_threshold
            )
            dets = clustering.detect_lanes(
                tiles, method="embedding", delta_push=cfg.delta_push
            )
            records = uncertainty.global_se(
                dets, item.scene, grid, assoc_threshold=cfg.assoc_threshold
            )
        else:
            raise ValueError(
                f"unknown uncertainty supervision {cfg.uncertainty_supervision!r}"
            )
        rows = np.array(
            [[rec.tile[0] * grid.width_tiles + rec.tile[1], *rec.se] for rec in records]
        ).reshape(-1, 4)
        per_scene.append(rows)
    return per_scene


def train_uncertainty(
    model: ToyPredictor,
    items,
    grid: GridConfig,
    cfg: TrainConfig,
    seed: int,
) -> tuple[ToyPredictor, list[dict]]:
    """Stage 2: freeze everything but the log-variance head, minimise NLL."""
    data = prepare_scenes(items, grid, cfg)
    per_scene_se = _collect_se_tiles(model, data, grid, cfg)
    usable = [k for k, rows in enumerate(per_scene_se) if rows.shape[0] > 0]
    if not usable:
        raise ValueError("no squared-error records; cannot train uncertainty")

    lv = model.cfg.head_slices()["log_var"]
    opt = _RmsProp(model.params(), cfg.rmsprop_decay, cfg.rmsprop_eps)
    rng = np.random.default_rng(seed + 2)
    log: list[dict] = []
    last_good = math.inf
    for step in range(cfg.steps_stage2):
        idx = rng.choice(len(usable), size=min(cfg.batch_size, len(usable)), replace=False)
        total = 0.0
        n_records = 0
        grads = {k: np.zeros_like(v) for k, v in model.params().items()}
        for k in idx:
            item = data[usable[k]]
            rows = per_scene_se[usable[k]]
            outputs, hidden = forward(model, item.patches)
            tiles = rows[:, 0].astype(int)
            log_var = outputs[tiles][:, lv]
            nll = losses.nll_loss(log_var, sq_err=rows[:, 1:])
            total += nll.value
            n_records += rows.shape[0]
            grad_out = np.zeros_like(outputs)
            grad_lv = np.zeros((outputs.shape[0], 3))
            np.add.at(grad_lv, tiles, nll.grads["log_var"])
            grad_out[:, lv] = grad_lv
            g = backward(model, item.patches, hidden, grad_out)
            grads["w2"][:, lv] += g["w2"][:, lv]
            grads["b2"][lv] += g["b2"][lv]
        total /= max(n_records, 1)
        for name in ("w2", "b2"):
            grads[name] /= max(n_records, 1)
        if not math.isfinite(total):
            raise TrainingDiverged(step, last_good)
        last_good = total
        opt.step(model.params(), grads, cfg.lr_stage2)
        if step % cfg.log_every == 0 or step == cfg.steps_stage2 - 1:
            log.append({"stage": "uncertainty", "step": step, "loss": total})
    return model, log


# ── checkpoints ──────────────────────────────────────────────────────────

def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).decode(
            "ascii"
        ),
    }


def _decode_array(obj: dict) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(obj["data"]), dtype=np.float64)
    return arr.reshape(obj["shape"]).copy()


@dataclass
class Checkpoint:
    cfg: TrainConfig
    grid: GridConfig
    weights: dict[str, np.ndarray]
    stage: str               # "means" | "uncertainty"
    seed: int
    data_seeds: list[int] = field(default_factory=list)
    version: str = CHECKPOINT_VERSION

    def model(self) -> ToyPredictor:
        return ToyPredictor(
            cfg=self.cfg,
            w1=self.weights["w1"].copy(),
            b1=self.weights["b1"].copy(),
            w2=self.weights["w2"].copy(),
            b2=self.weights["b2"].copy(),
        )

    def to_json(self) -> str:
        obj = {
            "version": self.version,
            "stage": self.stage,
            "seed": self.seed,
            "data_seeds": self.data_seeds,
            "train_config": vars(self.cfg) | {},
            "grid": vars(self.grid) | {},
            "weights": {k: _encode_array(v) for k, v in self.weights.items()},
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        obj = json.loads(text)
        if obj.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {obj.get('version')!r}; "
                f"expected {CHECKPOINT_VERSION!r}"
            )
        cfg = TrainConfig(**obj["train_config"])
        weights = {k: _decode_array(v) for k, v in obj["weights"].items()}
        for name, want in (
            ("w1", (cfg.input_dim, cfg.hidden)),
            ("b1", (cfg.hidden,)),
            ("w2", (cfg.hidden, cfg.output_dim)),
            ("b2", (cfg.output_dim,)),
        ):
            if tuple(weights[name].shape) != want:
                raise ValueError(f"weight {name} has shape {weights[name].shape}, expected {want}")
        return cls(
            cfg=cfg,
            grid=GridConfig(**obj["grid"]),
            weights=weights,
            stage=obj["stage"],
            seed=obj["seed"],
            data_seeds=list(obj["data_seeds"]),
        )


def checkpoint_from_model(
    model: ToyPredictor, grid: GridConfig, stage: str, seed: int, data_seeds
) -> Checkpoint:
    return Checkpoint(
        cfg=model.cfg,
        grid=grid,
        weights={k: v.copy() for k, v in model.params().items()},
        stage=stage,
        seed=seed,
        data_seeds=sorted(int(s) for s in data_seeds),
    )
