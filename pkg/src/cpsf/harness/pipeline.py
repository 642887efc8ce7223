"""Pipeline stages operating on an artifact directory.

Every stage reads its inputs from and writes its outputs to ``out`` so the
CLI subcommands can be chained; all randomness comes from one master seed.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from ..agents import agent_episode, episode_seed, generate_dataset, rollout_episode
from ..conformal import ConformalRadii, calibrate
from ..controllers import as_controller, make_policy
from ..exceptions import InvalidInputError, MissingArtifactError
from ..filter import FilteredController, SafetyFilter, build_sftrain, concat_datasets
from ..gaussian import fit_gaussian
from ..predictor import ConstantVelocityPredictor, TrajectoryPredictor
from . import reports
from .config import STREAM_EVAL, STREAM_TEST, TAG_FILTER, TAG_PREDICTOR, ExperimentConfig, derived_seed
from .evaluate import evaluate, evaluation_seeds, metrics_to_csv, report_from_rows
from .io import read_json, read_jsonl, write_json, write_jsonl

log = logging.getLogger(__name__)

SPLITS = ("ytrain", "train", "cal", "test")


class Artifacts:
    """Fixed file layout below an output directory."""

    def __init__(self, out):
        self.root = Path(out)

    def split(self, name):
        return self.root / "data" / f"{name}.jsonl"

    @property
    def manifest(self):
        return self.root / "data" / "manifest.json"

    @property
    def predictor(self):
        return self.root / "models" / "predictor.json"

    def radii(self, kind):
        return self.root / "radii" / f"{kind}.json"

    def filter(self, policy, kind):
        return self.root / "models" / f"filter_{policy}_{kind}.json"

    def report(self, name):
        return self.root / "reports" / name


# -- stages ------------------------------------------------------------------


def gen_data(cfg: ExperimentConfig, seed: int, out) -> dict:
    art = Artifacts(out)
    ytrain, train, cal = generate_dataset(cfg.world, cfg.data.n_episodes, cfg.data.fractions, seed,
                                          cfg.data.cal_count)
    test = [agent_episode(cfg.world, episode_seed(seed, i, STREAM_TEST)) for i in range(cfg.data.test_count)]
    sizes = {}
    for name, eps in zip(SPLITS, (ytrain, train, cal, test)):
        write_jsonl(eps, art.split(name))
        sizes[name] = len(eps)
    manifest = {"schema_version": 1, "seed": int(seed), "config_hash": cfg.hash(), "sizes": sizes}
    write_json(manifest, art.manifest)
    return manifest


def load_split(out, name):
    return read_jsonl(Artifacts(out).split(name), "gen-data")


def train_predictor(cfg: ExperimentConfig, seed: int, out):
    art = Artifacts(out)
    p = cfg.predictor
    if p.kind == "constant_velocity":
        model = ConstantVelocityPredictor(cfg.world.num_agents, p.horizon, p.window).fit()
        write_json({"kind": "constant_velocity_predictor", "estimator": model.get_params()}, art.predictor)
        return model
    if p.kind != "lstm":
        raise InvalidInputError(f"unknown predictor kind {p.kind!r}")
    model = TrajectoryPredictor(
        num_agents=cfg.world.num_agents, horizon=p.horizon, window=p.window, hidden=p.hidden,
        layers=p.layers, workspace_half_width=cfg.world.workspace_half_width,
        offset_scale=p.offset_scale, anchor=p.anchor, epochs=p.epochs, batch_size=p.batch_size,
        lr=p.lr, val_fraction=p.val_fraction, random_state=derived_seed(seed, TAG_PREDICTOR),
    )
    model.fit(load_split(out, "ytrain"))
    art.predictor.parent.mkdir(parents=True, exist_ok=True)
    model.save(art.predictor)
    return model


def load_predictor(out):
    path = Artifacts(out).predictor
    payload = read_json(path, "train-predictor")
    if payload.get("kind") == "constant_velocity_predictor":
        return ConstantVelocityPredictor(**payload["estimator"]).fit()
    return TrajectoryPredictor.load(path)


def run_calibration(cfg: ExperimentConfig, out) -> ConformalRadii:
    art = Artifacts(out)
    model = load_predictor(out)
    cal = load_split(out, "cal")
    c = cfg.conformal
    radii = calibrate(model, cal, c.delta, cfg.mission_T, c.t_obs, c.reduction)
    art.radii("conformal").parent.mkdir(parents=True, exist_ok=True)
    radii.save(art.radii("conformal"))
    rows = reports.coverage_table(radii, model, cal, c.t_obs, c.reduction)
    art.report("calibration.csv").parent.mkdir(parents=True, exist_ok=True)
    art.report("calibration.csv").write_text(reports.table_to_csv(rows))
    return radii


def run_fit_gaussian(cfg: ExperimentConfig, out) -> ConformalRadii:
    art = Artifacts(out)
    model = load_predictor(out)
    cal = load_split(out, "cal")
    g = fit_gaussian(model, cal, t_obs=cfg.conformal.t_obs, delta_bar=cfg.gaussian_delta_bar,
                     reduction=cfg.conformal.reduction)
    container = g.as_conformal_container(delta=cfg.conformal.delta)
    art.radii("gaussian").parent.mkdir(parents=True, exist_ok=True)
    container.save(art.radii("gaussian"))
    return container


def load_radii(out, kind="conformal") -> ConformalRadii:
    path = Artifacts(out).radii(kind)
    if not path.is_file():
        raise MissingArtifactError(path, "calibrate" if kind == "conformal" else "fit-gaussian")
    return ConformalRadii.load(path)


def _filter_estimator(cfg: ExperimentConfig, seed: int) -> SafetyFilter:
    f = cfg.filter
    return SafetyFilter(
        num_agents=cfg.world.num_agents, horizon=cfg.predictor.horizon, hidden=f.hidden, layers=f.layers,
        margin=f.margin, penalty=f.penalty, penalty_growth=f.penalty_growth, penalty_every=f.penalty_every,
        max_penalty=f.max_penalty, target_violation_rate=f.target_violation_rate, epochs=f.epochs,
        batch_size=f.batch_size, lr=f.lr, val_fraction=f.val_fraction,
        speed_clip_leak=f.speed_clip_leak, prediction_encoding=f.prediction_encoding,
        mirror_augment=f.mirror_augment, dt=cfg.world.dt, vehicle=cfg.world.vehicle,
        random_state=seed,
    )


def fit_filter(cfg: ExperimentConfig, seed: int, model, policy, radii, episodes) -> SafetyFilter:
    """Build filter training records, fit, then optionally aggregate on-policy states.

    Each aggregation round replays the filter-training episodes under the
    current filter, adds records cut at the states it visits (targets are
    still the nominal rollouts from those states) and refits on the union.
    """
    world = cfg.world
    t_obs = cfg.conformal.t_obs
    rs = derived_seed(seed, TAG_FILTER)
    stride = cfg.filter.cut_stride
    parts = [build_sftrain(episodes, model, policy, radii, t_obs, world, cut_stride=stride)]
    est = _filter_estimator(cfg, rs).fit(parts[0])
    for r in range(cfg.filter.aggregation_rounds):
        ctl = FilteredController(model, policy, est, radii, world, warmup=t_obs)
        parts.append(build_sftrain(episodes, model, policy, radii, t_obs, world, cut_stride=stride,
                                   controller=ctl))
        est = _filter_estimator(cfg, rs).fit(concat_datasets(parts))
        log.info("aggregation round %d: %d records", r + 1, sum(len(p) for p in parts))
    return est


def train_filter(cfg: ExperimentConfig, seed: int, out, policy_name: str, kind="conformal") -> SafetyFilter:
    art = Artifacts(out)
    est = fit_filter(cfg, seed, load_predictor(out), make_policy(policy_name, cfg.world), load_radii(out, kind),
                     load_split(out, "train"))
    path = art.filter(policy_name, kind)
    path.parent.mkdir(parents=True, exist_ok=True)
    est.save(path)
    return est


def load_filter(out, policy_name, kind="conformal") -> SafetyFilter:
    path = Artifacts(out).filter(policy_name, kind)
    if not path.is_file():
        raise MissingArtifactError(path, "train-filter")
    return SafetyFilter.load(path)


def build_controller(name: str, cfg: ExperimentConfig, out):
    """Rollout controller for ``aggressive``, ``orca``, ``stand_still``, ``cpsf-<p>`` or ``gasf-<p>``."""
    world = cfg.world
    prefix, _, base = name.partition("-")
    if not base:
        return as_controller(make_policy(name, world), world.dt)
    if prefix not in ("cpsf", "gasf"):
        raise InvalidInputError(f"unknown controller {name!r}")
    kind = "conformal" if prefix == "cpsf" else "gaussian"
    policy = make_policy(base, world)
    sf = load_filter(out, base, kind)
    return FilteredController(load_predictor(out), policy, sf, load_radii(out, kind), world,
                              warmup=cfg.conformal.t_obs)


def run_episode(cfg: ExperimentConfig, out, controller: str, seed: int):
    return rollout_episode(cfg.world, build_controller(controller, cfg, out), seed)


def run_evaluation(cfg: ExperimentConfig, seed: int, out, controllers=None, n_episodes=None):
    art = Artifacts(out)
    names = list(controllers or cfg.evaluate.controllers)
    ctls = {n: build_controller(n, cfg, out) for n in names}
    seeds = evaluation_seeds(seed, n_episodes or cfg.evaluate.n_episodes, STREAM_EVAL)
    rows = evaluate(ctls, cfg.world, seeds)
    coverage = {}
    radii_path = art.radii("conformal")
    if radii_path.is_file():
        r = ConformalRadii.load(radii_path)
        coverage = {"C": [float(c) for c in r.C], "delta_bar": r.delta_bar, "n": r.n}
    report = report_from_rows(rows, cfg.hash(), coverage)
    art.report("metrics.csv").parent.mkdir(parents=True, exist_ok=True)
    art.report("metrics.csv").write_text(metrics_to_csv(rows))
    report.save(art.report("report.json"))
    return report


def run_coverage_report(cfg: ExperimentConfig, out, kind="conformal") -> list:
    art = Artifacts(out)
    rows = reports.coverage_table(load_radii(out, kind), load_predictor(out), load_split(out, "test"),
                                  cfg.conformal.t_obs, cfg.conformal.reduction)
    csv_text = reports.table_to_csv(rows)
    art.report(f"coverage_{kind}.csv").parent.mkdir(parents=True, exist_ok=True)
    art.report(f"coverage_{kind}.csv").write_text(csv_text)
    art.report(f"coverage_{kind}.svg").write_text(reports.coverage_svg(reports.table_from_csv(csv_text)))
    return rows


def run_shift_diagnostic(cfg: ExperimentConfig, out) -> dict:
    s = cfg.shift
    result = reports.shift_diagnostic(load_split(out, "test"), load_predictor(out), cfg.conformal.t_obs,
                                      s.bins, s.horizons, s.histogram_bins, s.threshold,
                                      cfg.conformal.reduction)
    write_json(result, Artifacts(out).report("shift.json"))
    return result


def predict_from_line(out, line: str, t=None) -> dict:
    """Predictions for one JSONL episode line, cut at ``t`` (default: last step)."""
    from ..records import TrajectoryRecord

    rec = TrajectoryRecord.from_json(line)
    model = load_predictor(out)
    t = rec.num_steps if t is None else int(t)
    if not 1 <= t <= rec.num_steps:
        raise InvalidInputError(f"cut t={t} outside 1..{rec.num_steps}")
    bundle = model.predict(rec.agent_positions[: t + 1])
    return {"schema_version": 1, "seed": rec.seed, "issued_at": bundle.issued_at,
            "predicted": np.asarray(bundle.predicted).tolist()}
