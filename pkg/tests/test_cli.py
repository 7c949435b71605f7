"""Command-line workflow tests on a micro configuration.

Every command runs twice where determinism is claimed; outputs are
compared byte-for-byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from lanetiles.cli import main
from lanetiles.config import ConfigError, ExperimentConfig

MICRO_CONFIG = {
    "grid": {
        "width_tiles": 6,
        "height_tiles": 8,
        "tile_width": 1.28,
        "tile_length": 3.0,
        "origin_x": -3.84,
        "origin_y": 0.0,
    },
    "scenegen": {
        "topology": "parallel",
        "n_lanes_min": 1,
        "n_lanes_max": 2,
        "lane_spacing": 2.5,
        "x_span": 3.0,
        "y_end": 24.0,
        "surface_amplitude_max": 0.3,
    },
    "train": {
        "hidden": 16,
        "embed_dim": 2,
        "n_bins": 8,
        "steps_stage1": 120,
        "steps_stage2": 60,
        "batch_size": 2,
        "log_every": 20,
        "uncertainty_supervision": "tile",
    },
    "eval": {"ence_bins": 4},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Generated data, trained checkpoint and detections, shared by tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(MICRO_CONFIG))
    assert main([
        "gen-data", "--config", str(cfg_path), "--out", str(root / "train.jsonl"),
        "--n-scenes", "4", "--seed-base", "0",
    ]) == 0
    assert main([
        "gen-data", "--config", str(cfg_path), "--out", str(root / "test.jsonl"),
        "--n-scenes", "2", "--seed-base", "500",
    ]) == 0
    assert main([
        "gen-data", "--config", str(cfg_path), "--out", str(root / "calib.jsonl"),
        "--n-scenes", "2", "--seed-base", "900",
    ]) == 0
    assert main([
        "train", "--config", str(cfg_path), "--data", str(root / "train.jsonl"),
        "--out", str(root / "ckpt.json"), "--stage", "both", "--seed", "1",
        "--log", str(root / "train_log.jsonl"),
    ]) == 0
    assert main([
        "infer", "--config", str(cfg_path), "--checkpoint", str(root / "ckpt.json"),
        "--data", str(root / "test.jsonl"), "--out", str(root / "dets.jsonl"),
    ]) == 0
    return root, cfg_path


def test_gen_data_line_count_and_determinism(workdir, tmp_path):
    root, cfg_path = workdir
    lines = (root / "train.jsonl").read_text().strip().split("\n")
    assert len(lines) == 5  # header + 4 scenes
    again = tmp_path / "again.jsonl"
    assert main([
        "gen-data", "--config", str(cfg_path), "--out", str(again),
        "--n-scenes", "4", "--seed-base", "0",
    ]) == 0
    assert again.read_bytes() == (root / "train.jsonl").read_bytes()


def test_gen_data_rejects_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"grid": {"width_tiles": 4, "weird_key": 1}}))
    rc = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x.jsonl"),
               "--n-scenes", "1"])
    assert rc != 0
    assert "weird_key" in capsys.readouterr().err


def test_train_is_deterministic(workdir, tmp_path):
    root, cfg_path = workdir
    out2 = tmp_path / "ckpt2.json"
    assert main([
        "train", "--config", str(cfg_path), "--data", str(root / "train.jsonl"),
        "--out", str(out2), "--stage", "both", "--seed", "1",
    ]) == 0
    assert out2.read_bytes() == (root / "ckpt.json").read_bytes()


def test_train_log_written(workdir):
    root, _ = workdir
    entries = [json.loads(l) for l in (root / "train_log.jsonl").read_text().splitlines()]
    stages = {e["stage"] for e in entries}
    assert stages == {"means", "uncertainty"}


def test_train_uncertainty_requires_init(workdir, tmp_path, capsys):
    root, cfg_path = workdir
    rc = main([
        "train", "--config", str(cfg_path), "--data", str(root / "train.jsonl"),
        "--out", str(tmp_path / "x.json"), "--stage", "uncertainty",
    ])
    assert rc != 0
    assert "--init" in capsys.readouterr().err


def test_infer_deterministic_and_structured(workdir, tmp_path):
    root, cfg_path = workdir
    out2 = tmp_path / "dets2.jsonl"
    assert main([
        "infer", "--config", str(cfg_path), "--checkpoint", str(root / "ckpt.json"),
        "--data", str(root / "test.jsonl"), "--out", str(out2),
    ]) == 0
    assert out2.read_bytes() == (root / "dets.jsonl").read_bytes()
    lines = [json.loads(l) for l in (root / "dets.jsonl").read_text().splitlines()]
    header = lines[0]
    assert header["schema"] == "lanetiles-detections/v1"
    assert "config_hash" in header and "tool_version" in header
    assert len(lines) == 3  # header + 2 scenes


def test_infer_mismatched_grid_fails(workdir, tmp_path, capsys):
    root, cfg_path = workdir
    other = json.loads(Path(cfg_path).read_text())
    other["grid"]["width_tiles"] = 4
    other["grid"]["origin_x"] = -2.56
    other_path = tmp_path / "other.json"
    other_path.write_text(json.dumps(other))
    rc = main([
        "infer", "--config", str(other_path), "--checkpoint", str(root / "ckpt.json"),
        "--data", str(root / "test.jsonl"), "--out", str(tmp_path / "x.jsonl"),
    ])
    assert rc != 0
    assert "grid" in capsys.readouterr().err


def test_calibrate_refuses_split_overlap(workdir, tmp_path, capsys):
    root, cfg_path = workdir
    rc = main([
        "calibrate", "--config", str(cfg_path), "--checkpoint", str(root / "ckpt.json"),
        "--data", str(root / "train.jsonl"), "--out", str(tmp_path / "calib.json"),
    ])
    assert rc != 0
    assert "overlap" in capsys.readouterr().err


def test_calibrate_and_eval_roundtrip(workdir, tmp_path):
    root, cfg_path = workdir
    calib_path = root / "calib.json"
    assert main([
        "calibrate", "--config", str(cfg_path), "--checkpoint", str(root / "ckpt.json"),
        "--data", str(root / "calib.jsonl"), "--out", str(calib_path),
    ]) == 0
    calib = json.loads(calib_path.read_text())
    assert calib["schema"] == "lanetiles-calibration/v1"
    assert all(calib["temperatures"][k] > 0 for k in ("t_r", "t_phi", "t_dz"))
    assert calib["n_records"] > 0

    out = tmp_path / "report"
    assert main([
        "eval", "--config", str(cfg_path), "--detections", str(root / "dets.jsonl"),
        "--data", str(root / "test.jsonl"), "--out", str(out),
        "--calibration", str(calib_path),
    ]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["schema"] == "lanetiles-report/v1"
    assert 0.0 <= report["report"]["ap"] <= 1.0
    assert report["calibrated"] is True


def test_eval_deterministic(workdir, tmp_path):
    root, cfg_path = workdir
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main([
            "eval", "--config", str(cfg_path), "--detections", str(root / "dets.jsonl"),
            "--data", str(root / "test.jsonl"), "--out", str(out),
        ]) == 0
        outs.append((tmp_path / f"{name}.json").read_bytes())
    assert outs[0] == outs[1]


def test_eval_compare_mode(workdir, tmp_path):
    root, cfg_path = workdir
    dets_greedy = tmp_path / "dets_greedy.jsonl"
    assert main([
        "infer", "--config", str(cfg_path), "--checkpoint", str(root / "ckpt.json"),
        "--data", str(root / "test.jsonl"), "--out", str(dets_greedy),
        "--clustering", "greedy",
    ]) == 0
    out = tmp_path / "cmp"
    assert main([
        "eval", "--config", str(cfg_path), "--detections", str(root / "dets.jsonl"),
        "--data", str(root / "test.jsonl"), "--out", str(out),
        "--compare", str(dets_greedy),
    ]) == 0
    report = json.loads((tmp_path / "cmp.json").read_text())
    assert "primary" in report and "baseline" in report
    assert report["baseline"]["detections_file"] == str(dets_greedy)


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0


def test_config_defaults_match_reference_operating_point():
    cfg = ExperimentConfig()
    assert cfg.grid.width_tiles == 16
    assert cfg.grid.height_tiles == 26
    assert cfg.grid.tile_width == pytest.approx(1.28)
    assert cfg.grid.tile_length == pytest.approx(3.0)
    assert cfg.train.delta_pull == pytest.approx(0.1)
    assert cfg.train.delta_push == pytest.approx(3.0)
    assert cfg.eval.score_threshold == pytest.approx(0.3)
    assert cfg.eval.assoc_threshold == pytest.approx(1.0)
    assert cfg.eval.iou_thresholds() == tuple(
        pytest.approx(v) for v in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    )


def test_config_hash_stable_and_sensitive():
    a = ExperimentConfig()
    b = ExperimentConfig.from_obj({"eval": {"ence_bins": 12}})
    assert a.config_hash() == ExperimentConfig().config_hash()
    assert a.config_hash() != b.config_hash()


def test_config_rejects_unknown_top_level_key():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_obj({"grids": {}})
