"""Command-line front end: gen-data, train, infer, calibrate, eval.

Every artifact embeds the tool version and the config hash it was
produced under, and every command is deterministic given its arguments;
eval refuses to mix files produced under different grid configurations.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__, clustering, evaluation, model, scenegen, tilecodec, uncertainty
from .config import ConfigError, ExperimentConfig
from .geometry import CameraPose, GridConfig

SCHEMA_DATASET = "lanetiles-scenes/v1"
SCHEMA_DETECTIONS = "lanetiles-detections/v1"
SCHEMA_CALIBRATION = "lanetiles-calibration/v1"
SCHEMA_REPORT = "lanetiles-report/v1"


class CliError(RuntimeError):
    pass


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.load(path)


def _stamp(cfg: ExperimentConfig, schema: str) -> dict:
    return {
        "schema": schema,
        "tool_version": __version__,
        "config_hash": cfg.config_hash(),
    }


def _write_json(path: str, obj: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _read_jsonl(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


# ── gen-data ─────────────────────────────────────────────────────────────

def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    header = _stamp(cfg, SCHEMA_DATASET) | {
        "seed_base": args.seed_base,
        "n_scenes": args.n_scenes,
        "grid": vars(cfg.grid) | {},
        "raster_factor": cfg.train.raster_factor,
    }
    items = list(
        scenegen.generate_dataset(
            cfg.scenegen,
            cfg.grid,
            cfg.noise,
            args.n_scenes,
            args.seed_base,
            factor=cfg.train.raster_factor,
        )
    )
    scenegen.dataset_write(args.out, items, header)
    counts: dict[str, int] = {}
    for scene, _ in items:
        counts[scene.topology] = counts.get(scene.topology, 0) + 1
    for name in sorted(counts):
        print(f"{name}: {counts[name]}")
    print(f"wrote {len(items)} scenes to {args.out}")
    return 0


# ── train ────────────────────────────────────────────────────────────────

def _read_dataset(path: str):
    header, items = scenegen.dataset_read(path)
    if not items:
        raise CliError(f"dataset {path} contains no scenes")
    return header, items


def _dataset_seeds(items) -> list[int]:
    return sorted(scene.seed for scene, _ in items)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    _, items = _read_dataset(args.data)
    train_cfg = cfg.train
    if args.uncertainty_supervision:
        import dataclasses

        train_cfg = dataclasses.replace(
            train_cfg, uncertainty_supervision=args.uncertainty_supervision
        )
    log: list[dict] = []
    seeds = _dataset_seeds(items)

    if args.stage in ("means", "both"):
        net, log1 = model.train_means(items, cfg.grid, train_cfg, args.seed)
        log.extend(log1)
        stage = "means"
    else:
        if not args.init:
            raise CliError("--stage uncertainty requires --init with a means checkpoint")
        ckpt = model.Checkpoint.from_json(open(args.init, encoding="utf-8").read())
        if ckpt.stage != "means":
            raise CliError(f"--init checkpoint has stage {ckpt.stage!r}, expected 'means'")
        for name in ("hidden", "embed_dim", "n_bins", "patch_k", "raster_factor"):
            got, want = getattr(ckpt.cfg, name), getattr(train_cfg, name)
            if got != want:
                raise CliError(
                    f"checkpoint {name}={got} does not match config {name}={want}"
                )
        net = ckpt.model()
        net.cfg = train_cfg
        stage = "means"

    if args.stage in ("uncertainty", "both"):
        net, log2 = model.train_uncertainty(net, items, cfg.grid, train_cfg, args.seed)
        log.extend(log2)
        stage = "uncertainty"

    ckpt = model.checkpoint_from_model(net, cfg.grid, stage, args.seed, seeds)
    extra = _stamp(cfg, "lanetiles-ckpt/v1") | {
        "uncertainty_supervision": train_cfg.uncertainty_supervision
    }
    obj = json.loads(ckpt.to_json()) | extra
    _write_json(args.out, obj)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            for entry in log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print(f"wrote checkpoint ({stage}) to {args.out}; final loss {log[-1]['loss']:.6g}")
    return 0


def _load_checkpoint(path: str) -> tuple[model.Checkpoint, dict]:
    obj = json.loads(open(path, encoding="utf-8").read())
    ckpt = model.Checkpoint.from_json(json.dumps(obj))
    return ckpt, obj


# ── infer ────────────────────────────────────────────────────────────────

def cmd_infer(args) -> int:
    cfg = _load_config(args.config)
    ckpt, ckpt_obj = _load_checkpoint(args.checkpoint)
    if vars(ckpt.grid) != vars(cfg.grid):
        raise CliError(
            f"checkpoint grid {vars(ckpt.grid)} does not match config grid {vars(cfg.grid)}"
        )
    if ckpt.cfg.n_bins != cfg.train.n_bins:
        raise CliError(
            f"checkpoint has {ckpt.cfg.n_bins} angle bins, config expects {cfg.train.n_bins}"
        )
    temps = None
    if args.calibration:
        calib = json.loads(open(args.calibration, encoding="utf-8").read())
        temps = uncertainty.TemperatureParams.from_obj(calib["temperatures"])
    _, items = _read_dataset(args.data)
    net = ckpt.model()
    method = args.clustering or cfg.eval.clustering

    lines = []
    for scene, raster in items:
        if raster is None:
            raise CliError(f"scene seed {scene.seed} has no raster; cannot infer")
        preds = model.predict(net, raster, ckpt.grid)
        tiles = tilecodec.decode_tiles(
            preds, ckpt.grid, scene.pose, cfg.eval.score_threshold,
            temperature=temps.as_tuple() if temps else (1.0, 1.0, 1.0),
        )
        dets = clustering.detect_lanes(
            tiles,
            method=method,
            delta_push=cfg.train.delta_push,
            max_gap=cfg.eval.max_gap,
        )
        lines.append(
            {
                "seed": scene.seed,
                "pose": {"pitch": scene.pose.pitch, "height": scene.pose.height},
                "detections": [d.to_obj() for d in dets],
            }
        )
    header = _stamp(cfg, SCHEMA_DETECTIONS) | {
        "grid": vars(ckpt.grid) | {},
        "clustering": method,
        "checkpoint_stage": ckpt.stage,
        "score_threshold": cfg.eval.score_threshold,
        "calibrated": temps is not None,
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    n = sum(len(l["detections"]) for l in lines)
    print(f"wrote {n} detections over {len(lines)} scenes to {args.out}")
    return 0


# ── calibrate ────────────────────────────────────────────────────────────

def cmd_calibrate(args) -> int:
    cfg = _load_config(args.config)
    ckpt, ckpt_obj = _load_checkpoint(args.checkpoint)
    if ckpt.stage != "uncertainty":
        raise CliError("calibration needs an uncertainty-stage checkpoint")
    _, items = _read_dataset(args.data)
    calib_seeds = set(_dataset_seeds(items))
    overlap = calib_seeds & set(ckpt.data_seeds)
    if overlap:
        raise CliError(
            f"calibration split overlaps training data on {len(overlap)} scene seeds "
            f"(e.g. {sorted(overlap)[:3]}); use a disjoint seed range"
        )
    net = ckpt.model()
    supervision = ckpt_obj.get("uncertainty_supervision", ckpt.cfg.uncertainty_supervision)
    records: list[uncertainty.SERecord] = []
    for scene, raster in items:
        preds = model.predict(net, raster, ckpt.grid)
        targets = tilecodec.encode_targets(scene, ckpt.grid, scene.pose)
        if supervision == "tile":
            records.extend(uncertainty.tile_local_se(preds, targets))
        else:
            tiles = tilecodec.decode_tiles(
                preds, ckpt.grid, scene.pose, cfg.eval.score_threshold
            )
            if not tiles:
                continue
            dets = clustering.detect_lanes(
                tiles, method=cfg.eval.clustering, delta_push=ckpt.cfg.delta_push,
                max_gap=cfg.eval.max_gap,
            )
            records.extend(
                uncertainty.global_se(
                    dets, scene, ckpt.grid, assoc_threshold=cfg.eval.assoc_threshold
                )
            )
    if not records:
        raise CliError("no squared-error records collected on the calibration split")
    temps = uncertainty.fit_temperature(records)
    obj = _stamp(cfg, SCHEMA_CALIBRATION) | {
        "temperatures": temps.to_obj(),
        "n_records": len(records),
        "supervision": supervision,
        "nll_before": uncertainty.records_nll(records),
        "nll_after": uncertainty.records_nll(records, temps),
        "calib_seeds": sorted(calib_seeds),
    }
    _write_json(args.out, obj)
    print(
        f"fitted T=(r {temps.t_r:.4g}, phi {temps.t_phi:.4g}, dz {temps.t_dz:.4g}) "
        f"on {len(records)} records"
    )
    return 0


# ── eval ─────────────────────────────────────────────────────────────────

def _load_detections(path: str):
    lines = list(_read_jsonl(path))
    if not lines or "schema" not in lines[0]:
        raise CliError(f"{path} is not a detections file")
    header, rows = lines[0], lines[1:]
    per_scene = {}
    for row in rows:
        dets = [clustering.LaneDetection.from_obj(o) for o in row["detections"]]
        per_scene[int(row["seed"])] = (
            dets,
            CameraPose(row["pose"]["pitch"], row["pose"]["height"]),
        )
    return header, per_scene


def _evaluate_one(det_path, items, cfg, temps):
    header, per_scene = _load_detections(det_path)
    grid = GridConfig(**header["grid"])
    dets_ps, gts_ps, matched = [], [], []
    for scene, _ in items:
        if scene.seed not in per_scene:
            raise CliError(f"detections file is missing scene seed {scene.seed}")
        dets, pose = per_scene[scene.seed]
        if temps is not None:
            dets = [
                uncertainty.apply_temperature_to_detection(d, grid, pose, temps)
                for d in dets
            ]
        dets_ps.append(dets)
        gts_ps.append([b for b in scene.lanes_bev()])
    report = evaluation.average_precision(
        dets_ps,
        gts_ps,
        iou_thresholds=cfg.eval.iou_thresholds(),
        dist_threshold=cfg.eval.assoc_threshold,
    )
    for dets, gts in zip(dets_ps, gts_ps):
        match = evaluation.associate(
            dets, [g[:, :2] for g in gts], cfg.eval.assoc_threshold, 0.5
        )
        matched.extend((dets[a], gts[b]) for a, b, _ in match.tp_pairs)
    calib_report = None
    if matched:
        records = evaluation.calibration_records(matched)
        if records.shape[0] >= cfg.eval.ence_bins:
            calib_report = evaluation.ence(records, cfg.eval.ence_bins)
    return header, report, calib_report


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    _, items = _read_dataset(args.data)
    temps = None
    if args.calibration:
        calib = json.loads(open(args.calibration, encoding="utf-8").read())
        temps = uncertainty.TemperatureParams.from_obj(calib["temperatures"])

    header, report, calib_report = _evaluate_one(args.detections, items, cfg, temps)
    if vars(cfg.grid) != header["grid"]:
        raise CliError(
            f"grid mismatch: eval config {vars(cfg.grid)} vs detections {header['grid']}"
        )
    primary = {
        "detections_file": args.detections,
        "calibrated": temps is not None,
        "report": report.to_obj(),
        "calibration": calib_report.to_obj() if calib_report else None,
    }
    if args.compare:
        _, report_b, calib_b = _evaluate_one(args.compare, items, cfg, temps)
        baseline = {
            "detections_file": args.compare,
            "calibrated": temps is not None,
            "report": report_b.to_obj(),
            "calibration": calib_b.to_obj() if calib_b else None,
        }
        out = _stamp(cfg, SCHEMA_REPORT) | {"primary": primary, "baseline": baseline}
    else:
        out = _stamp(cfg, SCHEMA_REPORT) | primary
    _write_json(args.out + ".json", out)
    if calib_report is not None:
        with open(args.out + ".csv", "w", encoding="utf-8") as fh:
            fh.write(calib_report.to_csv())
    print(f"AP {report.ap:.4f}  AP50 {report.ap50:.4f}  AP90 {report.ap90:.4f}")
    if calib_report is not None:
        print(f"ENCE {calib_report.ence:.4f}")
    print(f"wrote report to {args.out}.json")
    return 0


# ── entry point ──────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lanetiles",
        description="Semi-local BEV tile lane-detection toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, required=True)
    p.add_argument("--seed-base", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the per-tile predictor")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=["means", "uncertainty", "both"], default="both")
    p.add_argument("--init", help="means checkpoint for --stage uncertainty")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="JSON-Lines training log path")
    p.add_argument(
        "--uncertainty-supervision", choices=["global", "tile"], default=None
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run detection on a dataset")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clustering", choices=["embedding", "greedy"], default=None)
    p.add_argument("--calibration", help="calibration JSON to scale variances")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("calibrate", help="fit temperature scaling on a held-out split")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate detections against GT")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--detections", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output prefix (.json/.csv)")
    p.add_argument("--calibration", help="calibration JSON to scale variances")
    p.add_argument("--compare", help="second detections file for side-by-side")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, ValueError, OSError, model.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
