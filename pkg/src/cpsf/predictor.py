"""Multi-horizon trajectory prediction for the ambient agents.

:class:`TrajectoryPredictor` is a stacked LSTM over a fixed window of
past joint agent positions whose linear head emits all ``H`` future steps
at once.  Outputs are displacements from an anchor trajectory: either
each agent's last observed position (``anchor="last"``) or its
constant-velocity extrapolation (``anchor="constant_velocity"``).  An
all-zero network therefore predicts exactly the anchor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidInputError, ShapeError
from .learncore import (
    ModelParams,
    Tensor,
    fit_minibatch,
    forward_recurrent,
    init_lstm,
    load_container,
    no_grad,
    save_container,
)
from .validation import check_episodes, check_history


@dataclass
class PredictionBundle:
    predicted: np.ndarray  # (H, m, 2)
    issued_at: int

    @property
    def horizon(self) -> int:
        return self.predicted.shape[0]


def constant_velocity_predict(history, H: int, issued_at=None) -> PredictionBundle:
    """Extrapolate each agent at its last observed per-step displacement."""
    history = check_history(history, min_length=2)
    last = history[-1]
    step = last - history[-2]
    h = np.arange(1, H + 1)[:, None, None]
    t = history.shape[0] - 1 if issued_at is None else issued_at
    return PredictionBundle(last[None] + h * step[None], t)


def pad_window(history: np.ndarray, window: int) -> np.ndarray:
    """Last ``window`` snapshots, front-padded by repeating the first one."""
    if history.shape[0] >= window:
        return history[-window:]
    pad = np.repeat(history[:1], window - history.shape[0], axis=0)
    return np.concatenate([pad, history], axis=0)


def episode_windows(positions: np.ndarray, window: int, horizon: int, cuts=None):
    """(windows, targets) for every cut ``t`` with ``1 <= t`` and ``t + horizon`` recorded."""
    n = positions.shape[0]
    if cuts is None:
        cuts = range(1, n - horizon)
    wins, tars = [], []
    for t in cuts:
        wins.append(pad_window(positions[: t + 1], window))
        tars.append(positions[t + 1 : t + 1 + horizon])
    return wins, tars


class TrajectoryPredictor(BaseEstimator):
    """Stacked-LSTM predictor of ``horizon`` future joint agent positions.

    Parameters
    ----------
    num_agents : int
    horizon : int
        Number of future steps ``H`` emitted per query.
    window : int
        History length fed to the network; shorter histories are padded.
    hidden, layers : int
        Width and depth of the recurrent backbone.
    workspace_half_width : float
        Absolute positions are divided by this before entering the network.
    offset_scale : float
        Meters per unit of displacement features and outputs.
    anchor : {"constant_velocity", "last"}
        Reference trajectory the network output is added to.
    """

    def __init__(
        self,
        num_agents=4,
        horizon=7,
        window=8,
        hidden=128,
        layers=2,
        workspace_half_width=6.0,
        offset_scale=0.1,
        anchor="constant_velocity",
        epochs=15,
        batch_size=256,
        lr=1e-3,
        val_fraction=0.1,
        random_state=0,
    ):
        self.num_agents = num_agents
        self.horizon = horizon
        self.window = window
        self.hidden = hidden
        self.layers = layers
        self.workspace_half_width = workspace_half_width
        self.offset_scale = offset_scale
        self.anchor = anchor
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.val_fraction = val_fraction
        self.random_state = random_state

    # -- network plumbing --------------------------------------------------

    @property
    def n_features(self):
        return 4 * self.num_agents

    @property
    def n_outputs(self):
        return 2 * self.num_agents * self.horizon

    def init_params(self, zero=False) -> "TrajectoryPredictor":
        rng = np.random.default_rng(self.random_state)
        self.params_ = init_lstm(self.n_features, self.hidden, self.layers, self.n_outputs, rng)
        # start from the anchor trajectory exactly
        self.params_["head_W"].data[...] = 0.0
        if zero:
            for t in self.params_:
                t.data[...] = 0.0
        self.train_curve_, self.val_curve_ = [], []
        return self

    def _encode(self, windows: np.ndarray) -> np.ndarray:
        # windows: (B, W, m, 2) -> (B, W, 4m)
        B, W, m, _ = windows.shape
        last = windows[:, -1:, :, :]
        absolute = windows / self.workspace_half_width
        relative = (windows - last) / self.offset_scale
        return np.concatenate([absolute.reshape(B, W, 2 * m), relative.reshape(B, W, 2 * m)], axis=-1)

    def _forward(self, windows: np.ndarray) -> Tensor:
        _, out = forward_recurrent(self.params_, self._encode(windows))
        return out

    def _anchor(self, windows: np.ndarray) -> np.ndarray:
        last = windows[:, -1][:, None]
        if self.anchor == "last":
            return np.repeat(last, self.horizon, axis=1)
        if self.anchor != "constant_velocity":
            raise InvalidInputError(f"unknown anchor {self.anchor!r}")
        step = (windows[:, -1] - windows[:, -2])[:, None]
        h = np.arange(1, self.horizon + 1)[None, :, None, None]
        return last + h * step

    def _decode(self, out: np.ndarray, windows: np.ndarray) -> np.ndarray:
        B = windows.shape[0]
        offsets = out.reshape(B, self.horizon, self.num_agents, 2) * self.offset_scale
        return self._anchor(windows) + offsets

    # -- estimator API -----------------------------------------------------

    def fit(self, episodes, y=None):
        """Train on agent trajectories (list of records or (steps+1, m, 2) arrays)."""
        positions = check_episodes(episodes, self.num_agents, min_steps=self.horizon + 1)
        rng = np.random.default_rng(self.random_state)
        self.init_params()
        order = rng.permutation(len(positions))
        n_val = int(round(self.val_fraction * len(positions))) if len(positions) > 1 else 0
        val_eps = [positions[i] for i in order[:n_val]]
        train_eps = [positions[i] for i in order[n_val:]]
        Xtr, Ytr = self._examples(train_eps)
        Xva, Yva = self._examples(val_eps) if val_eps else (None, None)
        scale = self.offset_scale
        targets_tr = (Ytr - self._anchor(Xtr)).reshape(len(Xtr), -1) / scale

        def batch_loss(idx):
            out = self._forward(Xtr[idx])
            diff = out - targets_tr[idx]
            return diff.square().sum() * (scale * scale / len(idx))

        val_loss = None
        if Xva is not None and len(Xva):
            def val_loss():
                return float(np.mean(np.sum((self.predict_windows(Xva) - Yva) ** 2, axis=(1, 2, 3))))

        result = fit_minibatch(
            self.params_, batch_loss, len(Xtr), val_loss=val_loss, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr, rng=rng,
        )
        self.params_ = result.params
        self.train_curve_ = result.train_curve
        self.val_curve_ = result.val_curve
        self.best_epoch_ = result.best_epoch
        return self

    def _examples(self, episodes):
        wins, tars = [], []
        for pos in episodes:
            w, t = episode_windows(pos, self.window, self.horizon)
            wins.extend(w)
            tars.extend(t)
        if not wins:
            raise InvalidInputError("no training examples: episodes are too short")
        return np.array(wins), np.array(tars)

    def predict_windows(self, windows: np.ndarray) -> np.ndarray:
        """Batched prediction; ``windows`` is (B, window, m, 2), returns (B, H, m, 2)."""
        check_is_fitted(self, "params_")
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 4 or windows.shape[2] != self.num_agents or windows.shape[3] != 2:
            raise ShapeError(
                f"expected windows of shape (B, W, {self.num_agents}, 2), got {windows.shape}"
            )
        with no_grad():
            out = self._forward(windows).data
        return self._decode(out, windows)

    def predict(self, history, issued_at=None) -> PredictionBundle:
        """Predict the next ``horizon`` snapshots from ``history`` (t+1, m, 2)."""
        history = check_history(history, min_length=2)
        if history.shape[1] != self.num_agents:
            raise ShapeError(
                f"history has {history.shape[1]} agents, model expects {self.num_agents}"
            )
        win = pad_window(history, self.window)[None]
        t = history.shape[0] - 1 if issued_at is None else issued_at
        return PredictionBundle(self.predict_windows(win)[0], t)

    def predict_at(self, positions: np.ndarray, cuts) -> np.ndarray:
        """Predictions for one episode at each cut ``t`` (history ``0..t``)."""
        wins = np.array([pad_window(positions[: t + 1], self.window) for t in cuts])
        return self.predict_windows(wins)

    # -- persistence -------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "params_")
        payload = self.params_.to_dict()
        payload["kind"] = "trajectory_predictor"
        payload["estimator"] = self.get_params()
        payload["train_curve"] = list(self.train_curve_)
        payload["val_curve"] = list(self.val_curve_)
        save_container(path, payload)

    @classmethod
    def load(cls, path) -> "TrajectoryPredictor":
        payload = load_container(path)
        model = cls(**payload["estimator"])
        model.params_ = ModelParams.from_dict(payload)
        model.train_curve_ = payload.get("train_curve", [])
        model.val_curve_ = payload.get("val_curve", [])
        return model


class ConstantVelocityPredictor(BaseEstimator):
    """Same interface as :class:`TrajectoryPredictor`, no learned parameters."""

    def __init__(self, num_agents=4, horizon=7, window=8):
        self.num_agents = num_agents
        self.horizon = horizon
        self.window = window

    def fit(self, episodes=None, y=None):
        self.fitted_ = True
        return self

    def predict_windows(self, windows):
        windows = np.asarray(windows, dtype=np.float64)
        last = windows[:, -1][:, None]
        step = (windows[:, -1] - windows[:, -2])[:, None]
        h = np.arange(1, self.horizon + 1)[None, :, None, None]
        return last + h * step

    def predict(self, history, issued_at=None) -> PredictionBundle:
        return constant_velocity_predict(history, self.horizon, issued_at)

    def predict_at(self, positions, cuts):
        wins = np.array([pad_window(positions[: t + 1], self.window) for t in cuts])
        return self.predict_windows(wins)
