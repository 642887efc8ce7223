"""Experiment configuration: one TOML file, one section per module.

See ``configs/template.toml`` for every key with its default.  Unknown
keys are rejected so typos surface early.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from ..exceptions import InvalidInputError
from ..world import ScenarioConfig, VehicleParams


@dataclass
class DataSection:
    n_episodes: int = 2000
    # (predictor-train, filter-train, calibration) fractions of n_episodes
    fractions: tuple = (0.5, 0.5, 0.0)
    cal_count: int = 1000
    test_count: int = 1000


@dataclass
class PredictorSection:
    kind: str = "lstm"  # or "constant_velocity"
    horizon: int = 7
    window: int = 8
    hidden: int = 64
    layers: int = 2
    offset_scale: float = 0.1
    anchor: str = "constant_velocity"
    epochs: int = 5
    batch_size: int = 256
    lr: float = 1e-3
    val_fraction: float = 0.1


@dataclass
class ConformalSection:
    delta: float = 0.05
    # mission length for the union correction; 0 means world.horizon_T
    T: int = 0
    t_obs: int = 8
    reduction: str = "stacked"


@dataclass
class GaussianSection:
    # per-statement level; 0 means delta / T as for the conformal radii
    delta_bar: float = 0.0


@dataclass
class FilterSection:
    policies: tuple = ("aggressive", "orca")
    cut_stride: int = 1
    aggregation_rounds: int = 1
    hidden: int = 128
    layers: int = 3
    margin: float = 1.0
    penalty: float = 10.0
    penalty_growth: float = 2.0
    penalty_every: int = 5
    max_penalty: float = 40.0
    target_violation_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    val_fraction: float = 0.1
    speed_clip_leak: float = 1.0
    prediction_encoding: str = "plan_relative"
    mirror_augment: bool = False


@dataclass
class EvaluateSection:
    n_episodes: int = 200
    controllers: tuple = ("aggressive", "cpsf-aggressive", "orca", "cpsf-orca")


@dataclass
class ShiftSection:
    bins: tuple = (0.0, 1.5, 2.5, 3.5)
    horizons: tuple = (1, 4, 7)
    histogram_bins: int = 20
    threshold: float = 0.25


@dataclass
class ExperimentConfig:
    world: ScenarioConfig = field(default_factory=ScenarioConfig)
    data: DataSection = field(default_factory=DataSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    conformal: ConformalSection = field(default_factory=ConformalSection)
    gaussian: GaussianSection = field(default_factory=GaussianSection)
    filter: FilterSection = field(default_factory=FilterSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    shift: ShiftSection = field(default_factory=ShiftSection)

    @property
    def mission_T(self) -> int:
        return self.conformal.T or self.world.horizon_T

    @property
    def gaussian_delta_bar(self) -> float:
        return self.gaussian.delta_bar or self.conformal.delta / self.mission_T

    def to_dict(self) -> dict:
        return {f.name: _plain(asdict(getattr(self, f.name))) for f in fields(self)}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise InvalidInputError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = copy.deepcopy(d)
    sections = {f.name: f for f in fields(ExperimentConfig)}
    unknown = set(d) - set(sections)
    if unknown:
        raise InvalidInputError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    world = d.get("world", {})
    vehicle = world.pop("vehicle", {})
    out = ExperimentConfig()
    out.world = _build(ScenarioConfig, {**world, "vehicle": _build(VehicleParams, vehicle, "world.vehicle")}, "world")
    for name, cls in (("data", DataSection), ("predictor", PredictorSection), ("conformal", ConformalSection),
                      ("gaussian", GaussianSection), ("filter", FilterSection),
                      ("evaluate", EvaluateSection), ("shift", ShiftSection)):
        setattr(out, name, _build(cls, d.get(name, {}), name))
    return out


def load_config(path=None) -> ExperimentConfig:
    """Parse a TOML config; ``None`` gives all defaults."""
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise InvalidInputError(f"config file not found: {p}")
    with open(p, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise InvalidInputError(f"cannot parse {p}: {exc}") from exc
    return config_from_dict(raw)


def derived_seed(master: int, *tags) -> int:
    """32-bit seed for one pipeline stage, derived from the master seed."""
    ss = np.random.SeedSequence([int(master) % 2**63, *[int(t) for t in tags]])
    return int(ss.generate_state(1, np.uint32)[0])


# stage tags for derived_seed / episode streams
STREAM_DATA = 0
STREAM_EVAL = 2
STREAM_TEST = 3
TAG_PREDICTOR = 10
TAG_FILTER = 11
