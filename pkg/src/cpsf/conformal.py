"""Split conformal prediction radii for multi-step trajectory forecasts.

For every prediction step ``h`` one nonconformity score is taken per
calibration episode at a fixed observation cut ``t_obs``.  The radius
``C_h`` is the ``p``-th smallest of those scores with an infinity sentinel
appended, ``p = ceil((n + 1)(1 - delta_bar))``.  With ``delta_bar =
delta / T`` the per-step statements can be union-bounded over a mission of
``T`` steps.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidInputError, ShapeError
from .predictor import pad_window
from .validation import as_positions, check_probability

log = logging.getLogger(__name__)

RADII_SCHEMA_VERSION = 1


class InfiniteRadiusWarning(UserWarning):
    """Calibration set too small for the requested level; some radii are infinite."""


def nonconformity(true, predicted, reduction="stacked") -> float:
    """Prediction error of one joint snapshot.

    ``"stacked"`` is the Euclidean norm of the whole 2m-vector; ``"max"`` is
    the largest per-agent error, a tighter score that still bounds every
    agent's own error.
    """
    true = np.asarray(true, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if true.shape != predicted.shape:
        raise ShapeError(f"snapshot shapes differ: {true.shape} vs {predicted.shape}")
    return float(_scores(true, predicted, reduction))


def _scores(true, predicted, reduction):
    # true/predicted: (..., m, 2) -> (...)
    diff = true - predicted
    if reduction == "stacked":
        return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))
    if reduction == "max":
        return np.max(np.sqrt(np.sum(diff * diff, axis=-1)), axis=-1)
    raise InvalidInputError(f"unknown score reduction {reduction!r}")


def compute_delta_bar(delta, T) -> float:
    """Per-statement level ``delta / T``."""
    check_probability(delta, "delta")
    if int(T) != T or T < 1:
        raise InvalidInputError(f"T must be a positive integer, got {T}")
    return delta / T


def _exact(level) -> Fraction:
    # floats are read as the decimal they print as, so 0.05 means 1/20
    return level if isinstance(level, Fraction) else Fraction(repr(float(level)))


def exact_delta_bar(delta, T) -> Fraction:
    """``delta / T`` as a rational; ``float(delta / T)`` can round across an integer ``(n + 1) delta / T``."""
    compute_delta_bar(delta, T)
    return _exact(delta) / int(T)


def quantile_index(n: int, delta_bar) -> int:
    """``ceil((n + 1)(1 - delta_bar))`` in exact rational arithmetic.

    ``delta_bar`` may be a float or a :class:`~fractions.Fraction`.
    """
    return math.ceil((n + 1) * (1 - _exact(delta_bar)))


def min_calibration_size(delta_bar) -> int:
    """Smallest ``n`` for which ``quantile_index(n, delta_bar) <= n``."""
    return math.ceil(1 / _exact(delta_bar)) - 1


def conformal_quantile(scores, delta_bar) -> tuple:
    """(radius, p) for one list of scores; the radius is ``inf`` when p > n."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.ndim != 1 or s.size == 0:
        raise InvalidInputError("need a non-empty 1-D list of scores")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise InvalidInputError("scores must be finite and non-negative")
    p = quantile_index(s.size, delta_bar)
    s = np.append(s, np.inf)
    return float(s[p - 1]), p


@dataclass
class ConformalRadii:
    C: np.ndarray
    delta: float
    delta_bar: float
    n: int
    p: int
    method: str = "conformal"
    extra: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.C)

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.C)))

    def to_dict(self) -> dict:
        d = {
            "schema_version": RADII_SCHEMA_VERSION,
            "method": self.method,
            "delta": self.delta,
            "delta_bar": self.delta_bar,
            "n": self.n,
            "p": self.p,
            "C": [float(c) if math.isfinite(c) else "inf" for c in self.C],
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConformalRadii":
        known = {"schema_version", "method", "delta", "delta_bar", "n", "p", "C"}
        return cls(
            C=np.array([math.inf if c == "inf" else float(c) for c in d["C"]]),
            delta=d["delta"],
            delta_bar=d["delta_bar"],
            n=d["n"],
            p=d["p"],
            method=d.get("method", "conformal"),
            extra={k: v for k, v in d.items() if k not in known},
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ConformalRadii":
        return cls.from_dict(json.loads(Path(path).read_text()))


def score_table(model, episodes, t_obs=8, reduction="stacked") -> np.ndarray:
    """(n_episodes, H) nonconformity scores at the observation cut ``t_obs``."""
    H = model.horizon
    wins, futures = [], []
    for ep in episodes:
        pos = as_positions(ep)
        if pos.shape[0] < t_obs + H + 1:
            raise InvalidInputError(
                f"episode with {pos.shape[0] - 1} steps is too short for t_obs={t_obs}, H={H}"
            )
        wins.append(pad_window(pos[: t_obs + 1], model.window))
        futures.append(pos[t_obs + 1 : t_obs + 1 + H])
    if not wins:
        return np.zeros((0, H))
    pred = model.predict_windows(np.array(wins))
    return _scores(np.array(futures), pred, reduction)


class ConformalCalibrator(BaseEstimator):
    """Fit per-step conformal radii from calibration episodes.

    ``fit(model, episodes)`` stores ``scores_`` (n, H) and ``radii_``.
    """

    def __init__(self, delta=0.01, T=80, t_obs=8, reduction="stacked"):
        self.delta = delta
        self.T = T
        self.t_obs = t_obs
        self.reduction = reduction

    def fit(self, model, episodes):
        scores = score_table(model, episodes, self.t_obs, self.reduction)
        self.scores_ = scores
        self.radii_ = radii_from_scores(scores, self.delta, self.T)
        return self

    def transform(self, scores=None):
        check_is_fitted(self, "radii_")
        return self.radii_.C


def radii_from_scores(scores, delta, T) -> ConformalRadii:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise InvalidInputError("calibration scores must be a non-empty (n, H) array")
    delta_bar = compute_delta_bar(delta, T)
    exact = exact_delta_bar(delta, T)
    n = scores.shape[0]
    out = [conformal_quantile(scores[:, h], exact) for h in range(scores.shape[1])]
    C = np.array([c for c, _ in out])
    p = out[0][1]
    if not np.all(np.isfinite(C)):
        need = min_calibration_size(exact)
        msg = (
            f"conformal radii are infinite: n={n} calibration episodes but p={p} > n; "
            f"delta_bar={delta_bar:.6g} needs n >= {need}"
        )
        log.warning(msg)
        warnings.warn(msg, InfiniteRadiusWarning, stacklevel=3)
    return ConformalRadii(C=C, delta=float(delta), delta_bar=delta_bar, n=n, p=p)


def calibrate(model, episodes, delta, T, t_obs=8, reduction="stacked") -> ConformalRadii:
    return ConformalCalibrator(delta, T, t_obs, reduction).fit(model, episodes).radii_


def empirical_coverage(model, radii, episodes, t_obs=8, reduction="stacked") -> tuple:
    """(per-step coverage fractions, joint coverage) on held-out episodes."""
    C = np.asarray(getattr(radii, "C", getattr(radii, "radii", radii)), dtype=np.float64)
    if C.shape != (model.horizon,):
        raise ShapeError(f"radii length {C.shape} does not match model horizon {model.horizon}")
    if len(episodes) == 0:
        raise InvalidInputError("empty test set")
    scores = score_table(model, episodes, t_obs, reduction)
    inside = scores <= C[None, :]
    return inside.mean(axis=0), float(inside.all(axis=1).mean())
