"""Predictor and training tests.

The micro configuration (3x3 grid, hidden 8) keeps full finite-difference
weight checks fast; receptive-field locality is probed by perturbing a
single raster cell and diffing predictions.
"""

from __future__ import annotations

import json
import math

import numpy as np
import pytest
from fdcheck import fd_gradcheck

from lanetiles import geometry as geo
from lanetiles import losses
from lanetiles import model as md
from lanetiles import scenegen as sg
from lanetiles import tilecodec as tc

MICRO_GRID = geo.GridConfig(
    width_tiles=3, height_tiles=3, tile_width=1.28, tile_length=3.0,
    origin_x=-1.92, origin_y=0.0,
)
MICRO_CFG = md.TrainConfig(hidden=8, embed_dim=2, n_bins=8, steps_stage1=40,
                           steps_stage2=20, batch_size=2, log_every=10)


def micro_items(n=2, seed_base=0):
    cfg = sg.SceneGenConfig(
        topology="parallel", n_lanes_min=1, n_lanes_max=2, lane_spacing=1.5,
        x_span=1.5, y_end=9.0, surface_amplitude_max=0.2,
    )
    return list(
        sg.generate_dataset(cfg, MICRO_GRID, sg.NoiseConfig(), n, seed_base)
    )


def default_items(n=2, seed_base=0):
    grid = geo.GridConfig()
    return grid, list(
        sg.generate_dataset(sg.SceneGenConfig(), grid, sg.NoiseConfig(), n, seed_base)
    )


# ── forward ──────────────────────────────────────────────────────────────

def test_zero_weights_give_neutral_outputs():
    grid, items = default_items(1)
    cfg = md.TrainConfig()
    net = md.init_model(cfg, 0)
    net.w1[:] = 0.0
    net.w2[:] = 0.0
    preds = md.predict(net, items[0][1], grid)
    np.testing.assert_array_equal(preds.score_logit, 0.0)
    np.testing.assert_array_equal(preds.scores, 0.5)
    np.testing.assert_array_equal(preds.bin_logits, 0.0)


def test_forward_deterministic():
    grid, items = default_items(1)
    net = md.init_model(md.TrainConfig(), 3)
    a = md.predict(net, items[0][1], grid)
    b = md.predict(net, items[0][1], grid)
    np.testing.assert_array_equal(a.score_logit, b.score_logit)
    np.testing.assert_array_equal(a.embedding, b.embedding)


def test_forward_shape_mismatch():
    grid, items = default_items(1)
    net = md.init_model(md.TrainConfig(), 0)
    bad = sg.ObservationRaster(
        evidence=np.zeros((10, 10)), heights=np.zeros((10, 10))
    )
    with pytest.raises(ValueError):
        md.predict(net, bad, grid)


def test_receptive_field_locality():
    grid, items = default_items(1)
    cfg = md.TrainConfig()
    net = md.init_model(cfg, 1)
    raster = items[0][1]
    base = md.predict(net, raster, grid)

    rng = np.random.default_rng(0)
    f, half = cfg.raster_factor, cfg.patch_side // 2
    for _ in range(5):
        row = int(rng.integers(0, raster.evidence.shape[0]))
        col = int(rng.integers(0, raster.evidence.shape[1]))
        bumped = sg.ObservationRaster(raster.evidence.copy(), raster.heights.copy())
        bumped.evidence[row, col] += 1.0
        after = md.predict(net, bumped, grid)
        changed = np.argwhere(
            np.abs(after.score_logit - base.score_logit) > 1e-15
        )
        for j, i in changed:
            assert abs(j * f + f // 2 - row) <= half
            assert abs(i * f + f // 2 - col) <= half
        # every tile whose window covers the cell must actually change
        for j in range(grid.height_tiles):
            for i in range(grid.width_tiles):
                covers = (
                    abs(j * f + f // 2 - row) <= half
                    and abs(i * f + f // 2 - col) <= half
                )
                if covers:
                    assert np.abs(
                        after.score_logit[j, i] - base.score_logit[j, i]
                    ) > 0 or net.w1[:] .sum() == 0


# ── backward ─────────────────────────────────────────────────────────────

def test_zero_upstream_gradient():
    grid, items = default_items(1)
    cfg = md.TrainConfig()
    net = md.init_model(cfg, 2)
    patches = md.extract_patches(items[0][1], grid, cfg)
    out, hidden = md.forward(net, patches)
    grads = md.backward(net, patches, hidden, np.zeros_like(out))
    assert all(not g.any() for g in grads.values())


def test_micro_model_full_gradcheck():
    items = micro_items(1, seed_base=5)
    data = md.prepare_scenes(items, MICRO_GRID, MICRO_CFG)
    net = md.init_model(MICRO_CFG, 7)

    class _Wrap:
        def __init__(self, value, grads):
            self.value = value
            self.grads = grads

    def fn(arrays):
        probe = md.ToyPredictor(
            cfg=MICRO_CFG, w1=arrays["w1"], b1=arrays["b1"],
            w2=arrays["w2"], b2=arrays["b2"],
        )
        value, grads = md.scene_loss_and_grads(probe, data[0], MICRO_GRID, MICRO_CFG)
        return _Wrap(value, grads)

    arrays = {k: v.copy() for k, v in net.params().items()}
    fd_gradcheck(fn, arrays, ("w1", "b1", "w2", "b2"), n_points=40, rtol=1e-4)


def test_stage2_freezes_mean_heads():
    items = micro_items(2)
    net1, _ = md.train_means(items, MICRO_GRID, MICRO_CFG, seed=0)
    w1_before = net1.w1.copy()
    w2_before = net1.w2.copy()
    cfg2 = md.TrainConfig(**{**vars(MICRO_CFG), "uncertainty_supervision": "tile"})
    net2, _ = md.train_uncertainty(net1, items, MICRO_GRID, cfg2, seed=0)
    lv = MICRO_CFG.head_slices()["log_var"]
    np.testing.assert_array_equal(net2.w1, w1_before)
    mean_cols = np.ones(MICRO_CFG.output_dim, dtype=bool)
    mean_cols[lv] = False
    np.testing.assert_array_equal(net2.w2[:, mean_cols], w2_before[:, mean_cols])
    assert np.abs(net2.w2[:, lv] - w2_before[:, lv]).max() > 0


def test_stage2_never_changes_decoded_geometry():
    grid, items = default_items(2)
    cfg = md.TrainConfig(steps_stage1=60, steps_stage2=30, batch_size=2,
                         uncertainty_supervision="tile")
    net1, _ = md.train_means(items, grid, cfg, seed=1)
    scene, raster = items[0]
    before = md.predict(net1, raster, grid)
    net2, _ = md.train_uncertainty(net1, items, grid, cfg, seed=1)
    after = md.predict(net2, raster, grid)
    np.testing.assert_array_equal(before.score_logit, after.score_logit)
    np.testing.assert_array_equal(before.r, after.r)
    np.testing.assert_array_equal(before.bin_logits, after.bin_logits)
    np.testing.assert_array_equal(before.embedding, after.embedding)
    assert np.abs(before.log_var - after.log_var).max() > 0


# ── training ─────────────────────────────────────────────────────────────

def test_training_reduces_loss():
    items = micro_items(1)
    cfg = md.TrainConfig(**{**vars(MICRO_CFG), "steps_stage1": 500, "log_every": 499})
    _, log = md.train_means(items, MICRO_GRID, cfg, seed=0)
    assert log[-1]["loss"] < log[0]["loss"]


def test_training_deterministic():
    items = micro_items(2)
    net_a, log_a = md.train_means(items, MICRO_GRID, MICRO_CFG, seed=4)
    net_b, log_b = md.train_means(items, MICRO_GRID, MICRO_CFG, seed=4)
    for k in net_a.params():
        np.testing.assert_array_equal(net_a.params()[k], net_b.params()[k])
    assert log_a == log_b


def test_training_loss_curve_smoothed_nonincreasing():
    grid, items = default_items(6)
    cfg = md.TrainConfig(steps_stage1=400, batch_size=4, log_every=1)
    _, log = md.train_means(items, grid, cfg, seed=2)
    values = np.array([e["loss"] for e in log])
    window = 50
    smoothed = np.convolve(values, np.ones(window) / window, mode="valid")
    # allow a small tolerance: mini-batch noise, but no sustained rise
    assert smoothed[-1] <= smoothed[0]
    assert (np.diff(smoothed) < 0.05 * smoothed[0]).all()


def test_training_empty_dataset():
    with pytest.raises(ValueError):
        md.train_means([], MICRO_GRID, MICRO_CFG, seed=0)


def test_divergence_reports_last_good_step():
    items = micro_items(1)
    cfg = md.TrainConfig(**{**vars(MICRO_CFG), "lr_stage1": 1e9, "steps_stage1": 50})
    with pytest.raises((md.TrainingDiverged, FloatingPointError)):
        with np.errstate(over="raise", invalid="raise"):
            md.train_means(items, MICRO_GRID, cfg, seed=0)


# ── checkpoints ──────────────────────────────────────────────────────────

def test_checkpoint_roundtrip_bytes():
    items = micro_items(1)
    net, _ = md.train_means(items, MICRO_GRID, MICRO_CFG, seed=0)
    ck = md.checkpoint_from_model(net, MICRO_GRID, "means", 0, [0])
    text = ck.to_json()
    back = md.Checkpoint.from_json(text)
    assert back.to_json() == text
    for k in ck.weights:
        np.testing.assert_array_equal(ck.weights[k], back.weights[k])


def test_checkpoint_version_rejected():
    items = micro_items(1)
    net, _ = md.train_means(items, MICRO_GRID, MICRO_CFG, seed=0)
    ck = md.checkpoint_from_model(net, MICRO_GRID, "means", 0, [0])
    obj = json.loads(ck.to_json())
    obj["version"] = "lanetiles-ckpt/v999"
    with pytest.raises(ValueError):
        md.Checkpoint.from_json(json.dumps(obj))


def test_checkpoint_shape_mismatch_rejected():
    items = micro_items(1)
    net, _ = md.train_means(items, MICRO_GRID, MICRO_CFG, seed=0)
    ck = md.checkpoint_from_model(net, MICRO_GRID, "means", 0, [0])
    obj = json.loads(ck.to_json())
    obj["train_config"]["hidden"] = 16
    with pytest.raises(ValueError):
        md.Checkpoint.from_json(json.dumps(obj))
