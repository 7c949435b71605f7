"""Experiment configuration: one JSON document driving every command.

All defaults follow the reference operating point: 16x26 grid of
1.28 m x 3 m tiles, pull/push margins 0.1 and 3, score threshold 0.3,
1 m association distance, curve-IOU thresholds 0.1:0.1:0.9.

Unknown keys anywhere in the document are rejected by name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .geometry import GridConfig
from .model import TrainConfig
from .scenegen import NoiseConfig, SceneGenConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    score_threshold: float = 0.3
    assoc_threshold: float = 1.0
    iou_start: float = 0.1
    iou_stop: float = 0.9
    iou_step: float = 0.1
    ence_bins: int = 10
    clustering: str = "embedding"
    max_gap: float = 3.3

    def iou_thresholds(self) -> tuple[float, ...]:
        out = []
        t = self.iou_start
        while t <= self.iou_stop + 1e-9:
            out.append(round(t, 6))
            t += self.iou_step
        return tuple(out)


_SECTIONS = {
    "grid": GridConfig,
    "scenegen": SceneGenConfig,
    "noise": NoiseConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridConfig = GridConfig()
    scenegen: SceneGenConfig = SceneGenConfig()
    noise: NoiseConfig = NoiseConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    def to_obj(self) -> dict:
        out = {}
        for name in _SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            out[name] = {
                k: list(v) if isinstance(v, tuple) else v for k, v in section.items()
            }
        return out

    def config_hash(self) -> str:
        payload = json.dumps(self.to_obj(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]

    @classmethod
    def from_obj(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(obj) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config key: {sorted(unknown)[0]!r}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            if name in obj:
                kwargs[name] = _section_from_obj(section_cls, obj[name], name)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_obj(obj)


def _section_from_obj(section_cls, obj: dict, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"config section {path!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(section_cls)}
    unknown = set(obj) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key: {path}.{sorted(unknown)[0]}")
    kwargs = {}
    for key, value in obj.items():
        default = fields[key].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return section_cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {path!r}: {exc}") from exc
