"""Learned predictive safety filter.

Offline, each training record holds agent predictions, the nominal
policy's planned inputs and states over the horizon, and the uncertainty
radii.  A feedforward network maps these to a corrected input sequence;
it is trained by rolling the bicycle model forward through the network
output and penalizing (a) distance to the nominal plan and (b) squared
intrusion into the inflated prediction discs.  Online, the first corrected
input is applied and everything is recomputed at the next step.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .agents import replay_episode, rollout_episode
from .controllers import agent_velocities, as_controller
from .exceptions import EpisodeAbortedError, InvalidInputError
from .learncore import (
    ModelParams,
    Tensor,
    fit_minibatch,
    forward_mlp,
    init_mlp,
    load_container,
    no_grad,
    save_container,
    stack,
)
from .world import ControlInput, ScenarioConfig, SystemState, VehicleParams, clamp_input, step_dynamics, wrap_angle

log = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1


class InfiniteRadiusFallbackWarning(UserWarning):
    """Radii are infinite online; the filter passes the nominal input through."""


# -- nominal rollout ---------------------------------------------------------


def nominal_rollout(state: SystemState, history, predictions, policy, dt=0.1,
                    vehicle=VehicleParams(), goal=None, H=None) -> tuple:
    """Forward-simulate the nominal policy against predicted agents.

    The first input uses the true current snapshot; input ``h`` uses the
    ``h``-th predicted snapshot.  Returns ``(x_nom (H, 4), u_nom (H, 2))``.
    """
    history = np.asarray(history, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    H = predictions.shape[0] if H is None else H
    if predictions.shape[0] < H:
        raise InvalidInputError(f"predictions cover {predictions.shape[0]} steps, need {H}")
    snapshot = history[-1]
    vel = agent_velocities(history, dt)
    x = state
    xs, us = [], []
    for h in range(H):
        u = policy(x, snapshot, vel, goal)
        if not (math.isfinite(u.accel) and math.isfinite(u.steer)):
            raise EpisodeAbortedError(f"nominal policy returned non-finite input at rollout step {h}")
        u = clamp_input(u, vehicle)
        x = step_dynamics(x, u, dt, vehicle)
        xs.append(x.as_array())
        us.append(u.as_array())
        if h + 1 < H:
            vel = (predictions[h] - snapshot) / dt
            snapshot = predictions[h]
    return np.array(xs), np.array(us)


# -- training records --------------------------------------------------------


@dataclass
class FilterTrainingRecord:
    predictions: np.ndarray  # (H, m, 2)
    u_nom: np.ndarray  # (H, 2)
    x_nom: np.ndarray  # (H, 4)
    radii: np.ndarray  # (H,)
    state: np.ndarray  # (4,)
    current: np.ndarray  # (m, 2) true agent positions at the cut
    seed: int = 0
    t: int = 0


class FilterDataset:
    """Column-stacked :class:`FilterTrainingRecord` s."""

    FIELDS = ("predictions", "u_nom", "x_nom", "radii", "state", "current", "seed", "t")

    def __init__(self, predictions, u_nom, x_nom, radii, state, current, seed, t, skipped_infinite=0):
        self.predictions = np.asarray(predictions, dtype=np.float64)
        self.u_nom = np.asarray(u_nom, dtype=np.float64)
        self.x_nom = np.asarray(x_nom, dtype=np.float64)
        self.radii = np.asarray(radii, dtype=np.float64)
        self.state = np.asarray(state, dtype=np.float64)
        self.current = np.asarray(current, dtype=np.float64)
        self.seed = np.asarray(seed, dtype=np.int64)
        self.t = np.asarray(t, dtype=np.int64)
        self.skipped_infinite = skipped_infinite

    def __len__(self):
        return self.u_nom.shape[0]

    def __getitem__(self, i) -> FilterTrainingRecord:
        return FilterTrainingRecord(*(getattr(self, f)[i] for f in self.FIELDS))

    def subset(self, idx) -> "FilterDataset":
        return FilterDataset(*(getattr(self, f)[idx] for f in self.FIELDS))

    @classmethod
    def from_records(cls, records, H=None, m=None) -> "FilterDataset":
        if not records:
            H = H or 0
            m = m or 0
            return cls(np.zeros((0, H, m, 2)), np.zeros((0, H, 2)), np.zeros((0, H, 4)),
                       np.zeros((0, H)), np.zeros((0, 4)), np.zeros((0, m, 2)),
                       np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        cols = {f: np.array([getattr(r, f) for r in records]) for f in cls.FIELDS}
        return cls(**cols)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for i in range(len(self)):
                rec = self[i]
                obj = {"schema_version": DATASET_SCHEMA_VERSION}
                for f in self.FIELDS:
                    v = getattr(rec, f)
                    obj[f] = v.tolist() if isinstance(v, np.ndarray) else int(v)
                fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "FilterDataset":
        records = []
        with open(path) as fh:
            for line in fh:
                obj = json.loads(line)
                records.append(FilterTrainingRecord(
                    predictions=np.array(obj["predictions"]), u_nom=np.array(obj["u_nom"]),
                    x_nom=np.array(obj["x_nom"]), radii=np.array(obj["radii"]),
                    state=np.array(obj["state"]), current=np.array(obj["current"]),
                    seed=obj["seed"], t=obj["t"]))
        return cls.from_records(records)


def build_sftrain(episodes, model, policy, radii, t_obs=8, config: ScenarioConfig = None,
                  cut_stride=None, controller=None) -> FilterDataset:
    """Filter training records from agents-only episodes.

    The ego is driven through each recorded episode by ``controller``
    (default: the nominal policy itself).  Records are cut at ``t_obs`` and,
    when ``cut_stride`` is given, every ``cut_stride`` steps after that
    while the ego is still en route.  Whatever visited the states, each
    record's targets are the nominal rollout from that state.
    """
    config = ScenarioConfig() if config is None else config
    C = np.asarray(getattr(radii, "C", radii), dtype=np.float64)
    if not np.all(np.isfinite(C)):
        raise InvalidInputError(
            "conformal radii are infinite; increase the calibration set "
            "(see the calibration warning) before building filter training data"
        )
    H = len(C)
    if controller is None:
        controller = as_controller(policy, config.dt)
    records = []
    for ep in episodes:
        if ep.system_start is None:
            raise InvalidInputError(f"episode {ep.seed} has no system start/goal")
        run, _ = replay_episode(config, controller, ep)
        last_cut = run.system_states.shape[0] - 2
        if cut_stride:
            cuts = list(range(t_obs, last_cut + 1, cut_stride))
        else:
            cuts = [t_obs] if t_obs <= last_cut else []
        if not cuts:
            continue
        preds = model.predict_at(ep.agent_positions, cuts)
        for k, t in enumerate(cuts):
            state = SystemState.from_array(run.system_states[t])
            hist = ep.agent_positions[: t + 1]
            x_nom, u_nom = nominal_rollout(state, hist, preds[k], policy, config.dt,
                                           config.vehicle, ep.system_goal, H)
            records.append(FilterTrainingRecord(preds[k], u_nom, x_nom, C.copy(),
                                                run.system_states[t].copy(), hist[-1].copy(),
                                                ep.seed, t))
    return FilterDataset.from_records(records, H, episodes[0].num_agents if episodes else 0)


def concat_datasets(datasets) -> FilterDataset:
    return FilterDataset(*(np.concatenate([getattr(d, f) for d in datasets]) for f in FilterDataset.FIELDS))


# -- ego frame and differentiable rollout ------------------------------------


def to_ego_frame(state, predictions, x_nom, current):
    """Translate/rotate batch quantities so the ego sits at the origin facing +x.

    ``state`` (B, 4), ``predictions`` (B, H, m, 2), ``x_nom`` (B, H, 4),
    ``current`` (B, m, 2).  Returns the transformed (predictions, x_nom,
    current) and the start states ``(0, 0, 0, v)``.
    """
    origin = state[:, None, :2]
    c, s = np.cos(state[:, 2]), np.sin(state[:, 2])
    rot = np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)  # (B, 2, 2) world->ego

    def tf(points):
        shape = points.shape
        flat = points.reshape(shape[0], -1, 2) - origin
        return np.einsum("bij,bnj->bni", rot, flat).reshape(shape)

    p = tf(predictions)
    cur = tf(current)
    xn = x_nom.copy()
    xn[..., :2] = tf(x_nom[..., :2])
    xn[..., 2] = wrap_angle(x_nom[..., 2] - state[:, None, 2])
    x0 = np.zeros_like(state)
    x0[:, 3] = state[:, 3]
    return p, xn, cur, x0


def sort_agents(predictions, current):
    """Reorder agents by current distance to the ego (frame origin)."""
    order = np.argsort(np.sum(current * current, axis=-1), axis=-1, kind="stable")
    idx = order[:, None, :, None]
    return np.take_along_axis(predictions, np.broadcast_to(idx, predictions.shape), axis=2)


def _mirror(prep: dict) -> dict:
    """Reflect ego-frame arrays across the heading axis (y -> -y)."""
    flip2 = np.array([1.0, -1.0])
    xn = prep["x_nom"] * np.array([1.0, -1.0, -1.0, 1.0])
    return {
        "pred": prep["pred"] * flip2,
        "x_nom": xn,
        "x0": prep["x0"] * np.array([1.0, -1.0, -1.0, 1.0]),
        "u_nom": prep["u_nom"] * flip2,
        "radii": prep["radii"],
    }


def rollout_tensor(x0, u, dt, vehicle: VehicleParams, speed_clip_leak=0.0):
    """Differentiable bicycle rollout; ``x0`` (B, 4) array, ``u`` Tensor (B, H, 2).

    Returns a list of H tensors of shape (B, 4).  Headings are not wrapped
    (they stay small in the ego frame).  ``speed_clip_leak`` lets gradient
    through the speed limits (see :meth:`Tensor.clip`); the values are
    unaffected.
    """
    x = Tensor(x0[:, 0])
    y = Tensor(x0[:, 1])
    th = Tensor(x0[:, 2])
    v = Tensor(x0[:, 3])
    out = []
    for h in range(u.shape[1]):
        a = u[:, h, 0]
        steer = u[:, h, 1]
        x, y, th, v = (
            x + v * th.cos() * dt,
            y + v * th.sin() * dt,
            th + v * steer.tan() * (dt / vehicle.wheelbase),
            (v + a * dt).clip(0.0, vehicle.v_max, leak=speed_clip_leak),
        )
        out.append(stack([x, y, th, v], axis=1))
    return out


def loss_terms(u, x0, x_nom, predictions, radii, margin, dt, vehicle, speed_clip_leak=0.0):
    """Per-record (imitation, hinge) tensors, each of shape (B,)."""
    states = rollout_tensor(x0, u, dt, vehicle, speed_clip_leak)
    imitation = None
    hinge = None
    for h, xh in enumerate(states):
        d = xh - x_nom[:, h, :]
        term = d.square().sum(axis=1)
        imitation = term if imitation is None else imitation + term
        pos = xh[:, :2].reshape(-1, 1, 2)
        diff = Tensor(predictions[:, h]) - pos  # (B, m, 2)
        dist = (diff.square().sum(axis=2) + 1e-12).sqrt()
        viol = (Tensor(radii[:, h : h + 1] + margin) - dist).relu().square().sum(axis=1)
        hinge = viol if hinge is None else hinge + viol
    return imitation, hinge


def filter_loss(u_hat, record: FilterTrainingRecord, penalty, margin, dt=0.1,
                vehicle=VehicleParams()) -> float:
    """Imitation error plus ``penalty`` times squared disc intrusions for one record."""
    u = Tensor(np.asarray(u_hat, dtype=np.float64)[None])
    imitation, hinge = loss_terms(
        u, np.asarray(record.state)[None], np.asarray(record.x_nom)[None],
        np.asarray(record.predictions)[None], np.asarray(record.radii)[None], margin, dt, vehicle,
    )
    return float((imitation + hinge * penalty).data[0])


def rollout_states(state, u_seq, dt=0.1, vehicle=VehicleParams()) -> np.ndarray:
    x = SystemState.from_array(state)
    out = []
    for a, s in u_seq:
        x = step_dynamics(x, clamp_input(ControlInput(a, s), vehicle), dt, vehicle)
        out.append(x.as_array())
    return np.array(out)


# -- the estimator -----------------------------------------------------------


class SafetyFilter(BaseEstimator):
    """Feedforward safety filter trained with a penalty-relaxed objective.

    Parameters
    ----------
    num_agents, horizon : int
    hidden, layers : int
        MLP width and number of hidden layers.
    margin : float
        Minimum separation added to the radii in the constraint.
    penalty : float
        Initial penalty weight; multiplied by ``penalty_growth`` after every
        ``penalty_every`` epochs while the validation violation rate is at or
        above ``target_violation_rate`` (at most ``max_penalty``).
    radius_jitter : float
        Training-time multiplicative jitter of the radii (0 disables).
    prediction_encoding : {"plan_relative", "ego"}
        Predicted agent positions enter the network either relative to the
        nominal planned position at the same step or in the plain ego frame.
    speed_clip_leak : float
        Gradient passed through the speed limits of the training rollout.
        With the exact derivative (0) a braking command at standstill gets
        no signal to recover, and the learned filter tends to freeze.
    mirror_augment : bool
        Add the reflection of every training record across the ego
        heading axis (the problem is left/right symmetric).
    """

    def __init__(
        self,
        num_agents=4,
        horizon=7,
        hidden=128,
        layers=3,
        margin=1.0,
        penalty=10.0,
        penalty_growth=2.0,
        penalty_every=5,
        max_penalty=640.0,
        target_violation_rate=0.01,
        epochs=30,
        batch_size=256,
        lr=1e-3,
        val_fraction=0.1,
        pos_scale=5.0,
        radius_jitter=0.0,
        prediction_encoding="plan_relative",
        speed_clip_leak=1.0,
        mirror_augment=False,
        dt=0.1,
        vehicle=VehicleParams(),
        random_state=0,
    ):
        self.num_agents = num_agents
        self.horizon = horizon
        self.hidden = hidden
        self.layers = layers
        self.margin = margin
        self.penalty = penalty
        self.penalty_growth = penalty_growth
        self.penalty_every = penalty_every
        self.max_penalty = max_penalty
        self.target_violation_rate = target_violation_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.val_fraction = val_fraction
        self.pos_scale = pos_scale
        self.radius_jitter = radius_jitter
        self.prediction_encoding = prediction_encoding
        self.speed_clip_leak = speed_clip_leak
        self.mirror_augment = mirror_augment
        self.dt = dt
        self.vehicle = vehicle
        self.random_state = random_state

    @property
    def n_inputs(self):
        H, m = self.horizon, self.num_agents
        return 2 * m * H + 2 * H + 4 * H + H

    @property
    def input_layout(self):
        H, m = self.horizon, self.num_agents
        return {
            "predictions": [0, 2 * m * H],
            "u_nom": [2 * m * H, 2 * m * H + 2 * H],
            "x_nom": [2 * m * H + 2 * H, 2 * m * H + 6 * H],
            "radii": [2 * m * H + 6 * H, 2 * m * H + 7 * H],
            "frame": "ego (origin at current position, +x along heading)",
            "agent_order": "ascending current distance",
        }

    def init_params(self):
        rng = np.random.default_rng(self.random_state)
        sizes = [self.n_inputs] + [self.hidden] * self.layers + [2 * self.horizon]
        self.params_ = init_mlp(sizes, rng, zero_last=True)
        return self

    def _prepare(self, ds: FilterDataset):
        """Ego-frame arrays and network features for a dataset."""
        p, xn, cur, x0 = to_ego_frame(ds.state, ds.predictions, ds.x_nom, ds.current)
        p = sort_agents(p, cur)
        return {"pred": p, "x_nom": xn, "x0": x0, "u_nom": ds.u_nom, "radii": ds.radii}

    def _features(self, prep, radii=None):
        B = prep["pred"].shape[0]
        vp = self.vehicle
        radii = prep["radii"] if radii is None else radii
        xn = prep["x_nom"]
        pred = prep["pred"]
        if self.prediction_encoding == "plan_relative":
            pred = pred - xn[:, :, None, :2]
        elif self.prediction_encoding != "ego":
            raise InvalidInputError(f"unknown prediction_encoding {self.prediction_encoding!r}")
        xfeat = np.concatenate(
            [xn[..., :2] / self.pos_scale, xn[..., 2:3], xn[..., 3:4] / vp.v_max], axis=-1
        )
        ufeat = prep["u_nom"] / np.array([vp.a_max, vp.steer_max])
        return np.concatenate(
            [(pred / self.pos_scale).reshape(B, -1), ufeat.reshape(B, -1),
             xfeat.reshape(B, -1), radii], axis=1
        )

    def _controls(self, features, u_nom):
        vp = self.vehicle
        bounds = np.array([vp.a_max, vp.steer_max])
        delta = forward_mlp(self.params_, features).reshape(-1, self.horizon, 2)
        u = Tensor(u_nom) + delta * bounds
        return stack([u[:, :, 0].clip(-vp.a_max, vp.a_max), u[:, :, 1].clip(-vp.steer_max, vp.steer_max)], axis=2)

    def _objective(self, prep, idx, penalty, radii=None):
        radii = prep["radii"][idx] if radii is None else radii
        sub = {k: v[idx] for k, v in prep.items()}
        u = self._controls(self._features(sub, radii), sub["u_nom"])
        imitation, hinge = loss_terms(u, sub["x0"], sub["x_nom"], sub["pred"], radii,
                                      self.margin, self.dt, self.vehicle, self.speed_clip_leak)
        return imitation, hinge

    def fit(self, dataset: FilterDataset, y=None):
        if len(dataset) == 0:
            raise InvalidInputError("empty filter training dataset")
        if not np.all(np.isfinite(dataset.radii)):
            raise InvalidInputError("filter training records contain infinite radii")
        rng = np.random.default_rng(self.random_state)
        self.init_params()
        # split by episode so validation records come from unseen episodes
        seeds = np.unique(dataset.seed)
        perm_seeds = seeds[rng.permutation(len(seeds))]
        n_val = int(round(self.val_fraction * len(seeds))) if len(seeds) > 1 else 0
        val_mask = np.isin(dataset.seed, perm_seeds[:n_val])
        train_idx = np.flatnonzero(~val_mask)
        val_idx = np.flatnonzero(val_mask)
        prep = self._prepare(dataset)
        tr = {k: v[train_idx] for k, v in prep.items()}
        if self.mirror_augment:
            mirrored = _mirror(tr)
            tr = {k: np.concatenate([v, mirrored[k]]) for k, v in tr.items()}
            train_idx = np.arange(len(tr["u_nom"]))
        va = {k: v[val_idx] for k, v in prep.items()} if len(val_idx) else tr
        n_va = len(va["u_nom"])
        state = {"penalty": float(self.penalty)}

        def batch_loss(idx):
            radii = tr["radii"][idx]
            if self.radius_jitter > 0:
                radii = radii * rng.uniform(1 - self.radius_jitter, 1 + self.radius_jitter, size=(len(idx), 1))
            imitation, hinge = self._objective(tr, idx, state["penalty"], radii)
            return (imitation + hinge * state["penalty"]).mean()

        def val_loss():
            with no_grad():
                imitation, hinge = self._objective(va, np.arange(n_va), state["penalty"])
            return float(np.mean(imitation.data + state["penalty"] * hinge.data))

        self.penalty_schedule_ = []
        self.train_curve_, self.val_curve_ = [], []
        remaining = self.epochs
        while remaining > 0:
            stage = min(self.penalty_every, remaining)
            result = fit_minibatch(self.params_, batch_loss, len(train_idx), val_loss=val_loss,
                                   epochs=stage, batch_size=self.batch_size, lr=self.lr, rng=rng)
            self.params_ = result.params
            remaining -= stage
            self.train_curve_ += result.train_curve
            self.val_curve_ += result.val_curve
            rate = self._violation_rate(va)
            self.penalty_schedule_.append((state["penalty"], rate))
            log.info("penalty %.4g val violation rate %.4f", state["penalty"], rate)
            if rate >= self.target_violation_rate and remaining > 0:
                state["penalty"] = min(state["penalty"] * self.penalty_growth, self.max_penalty)
        self.final_penalty_ = state["penalty"]
        self.val_violation_rate_ = self._violation_rate(va)
        self.val_metrics_ = self._metrics(va)
        return self

    def _violation_rate(self, prep, tol=1e-3):
        with no_grad():
            _, hinge = self._objective(prep, np.arange(len(prep["u_nom"])), 0.0)
        return float(np.mean(hinge.data > tol * tol))

    def _metrics(self, prep):
        with no_grad():
            imitation, hinge = self._objective(prep, np.arange(len(prep["u_nom"])), 0.0)
        return {"imitation": float(np.mean(imitation.data)), "hinge": float(np.mean(hinge.data))}

    def evaluate(self, dataset: FilterDataset) -> dict:
        """Mean imitation and hinge terms and the violation rate on ``dataset``."""
        check_is_fitted(self, "params_")
        prep = self._prepare(dataset)
        out = self._metrics(prep)
        out["violation_rate"] = self._violation_rate(prep)
        return out

    def predict_controls(self, dataset: FilterDataset) -> np.ndarray:
        """Filtered input sequences (B, H, 2), clamped to the input bounds."""
        check_is_fitted(self, "params_")
        prep = self._prepare(dataset)
        with no_grad():
            u = self._controls(self._features(prep), prep["u_nom"])
        return u.data

    def predict(self, record: FilterTrainingRecord) -> np.ndarray:
        ds = FilterDataset.from_records([record])
        return self.predict_controls(ds)[0]

    # -- persistence -------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "params_")
        payload = self.params_.to_dict()
        payload["kind"] = "safety_filter"
        est = self.get_params()
        est["vehicle"] = vars(self.vehicle).copy() if not hasattr(self.vehicle, "__dataclass_fields__") else {
            f: getattr(self.vehicle, f) for f in self.vehicle.__dataclass_fields__
        }
        payload["estimator"] = est
        payload["input_layout"] = self.input_layout
        payload["train_curve"] = list(self.train_curve_)
        payload["val_curve"] = list(self.val_curve_)
        payload["penalty_schedule"] = [list(x) for x in self.penalty_schedule_]
        save_container(path, payload)

    @classmethod
    def load(cls, path) -> "SafetyFilter":
        payload = load_container(path)
        est = dict(payload["estimator"])
        est["vehicle"] = VehicleParams(**est["vehicle"])
        model = cls(**est)
        model.params_ = ModelParams.from_dict(payload)
        model.train_curve_ = payload.get("train_curve", [])
        model.val_curve_ = payload.get("val_curve", [])
        model.penalty_schedule_ = [tuple(x) for x in payload.get("penalty_schedule", [])]
        return model


# -- online execution --------------------------------------------------------


class FilteredController:
    """Receding-horizon controller: predict, plan nominally, filter, apply first input.

    Until ``warmup`` steps of agent history exist the nominal policy is
    applied unfiltered.
    """

    def __init__(self, predictor, policy, safety_filter, radii, config: ScenarioConfig, warmup=8):
        self.predictor = predictor
        self.policy = policy
        self.safety_filter = safety_filter
        self.C = np.asarray(getattr(radii, "C", radii), dtype=np.float64)
        self.config = config
        self.warmup = warmup

    def plan(self, state: SystemState, history, goal) -> FilterTrainingRecord:
        try:
            pred = self.predictor.predict(history).predicted
        except Exception as exc:
            raise type(exc)(f"[predict] {exc}") from exc
        try:
            x_nom, u_nom = nominal_rollout(state, history, pred, self.policy, self.config.dt,
                                           self.config.vehicle, goal, len(self.C))
        except Exception as exc:
            raise type(exc)(f"[nominal rollout] {exc}") from exc
        return FilterTrainingRecord(pred, u_nom, x_nom, self.C, state.as_array(),
                                    np.asarray(history[-1]), 0, len(history) - 1)

    def __call__(self, state: SystemState, history, goal) -> ControlInput:
        history = np.asarray(history)
        vel = agent_velocities(history, self.config.dt)
        if history.shape[0] - 1 < self.warmup:
            return clamp_input(self.policy(state, history[-1], vel, goal), self.config.vehicle)
        record = self.plan(state, history, goal)
        if not np.all(np.isfinite(self.C)):
            warnings.warn("infinite conformal radii: passing nominal input through",
                          InfiniteRadiusFallbackWarning, stacklevel=2)
            a, s = record.u_nom[0]
            return ControlInput(float(a), float(s))
        try:
            u = self.safety_filter.predict(record)
        except Exception as exc:
            raise type(exc)(f"[filter] {exc}") from exc
        return clamp_input(ControlInput(float(u[0, 0]), float(u[0, 1])), self.config.vehicle)


def filtered_step(state, history, predictor, policy, safety_filter, radii, config, goal) -> ControlInput:
    """Filtered input for one step (no warm-up: the history must already suffice)."""
    return FilteredController(predictor, policy, safety_filter, radii, config, warmup=0)(
        state, history, goal
    )


def run_filtered_episode(config, predictor, policy, safety_filter, radii, seed, warmup=8):
    controller = FilteredController(predictor, policy, safety_filter, radii, config, warmup)
    return rollout_episode(config, controller, seed)
