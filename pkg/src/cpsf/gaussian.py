"""Gaussian-interval radii: mean + z * std of the per-step error magnitudes.

This is the non-conformal baseline.  It uses the very same score table as
:mod:`cpsf.conformal`, so the two radii plug into the filter identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .conformal import ConformalRadii, score_table
from .exceptions import InvalidInputError
from .validation import check_probability

# Acklam's rational approximation of the inverse normal CDF
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_quantile(p: float) -> float:
    """Standard normal quantile.

    Acklam's piecewise rational approximation (relative error ~1e-9)
    followed by one Halley step against ``math.erfc``.
    """
    p = check_probability(p, "p")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        )
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


@dataclass
class GaussianRadii:
    mean: np.ndarray
    std: np.ndarray
    z: float
    radii: np.ndarray
    delta_bar: float
    n: int

    @property
    def C(self) -> np.ndarray:
        return self.radii

    def as_conformal_container(self, delta=None) -> ConformalRadii:
        """Same JSON container as the conformal radii, tagged ``gaussian``."""
        return ConformalRadii(
            C=self.radii.copy(),
            delta=self.delta_bar if delta is None else delta,
            delta_bar=self.delta_bar,
            n=self.n,
            p=0,
            method="gaussian",
            extra={"mean": self.mean.tolist(), "std": self.std.tolist(), "z": self.z},
        )


def gaussian_from_scores(scores, delta_bar) -> GaussianRadii:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 2:
        raise InvalidInputError("need at least 2 calibration episodes for a Gaussian fit")
    delta_bar = check_probability(delta_bar, "delta_bar")
    mean = scores.mean(axis=0)
    std = scores.std(axis=0, ddof=1)
    # a constant column is fitted exactly (summation rounding aside)
    const = np.ptp(scores, axis=0) == 0
    mean[const] = scores[0, const]
    std[const] = 0.0
    z = normal_quantile(1.0 - delta_bar)
    return GaussianRadii(mean, std, z, mean + z * std, delta_bar, scores.shape[0])


class GaussianCalibrator(BaseEstimator):
    def __init__(self, delta_bar=0.05, t_obs=8, reduction="stacked"):
        self.delta_bar = delta_bar
        self.t_obs = t_obs
        self.reduction = reduction

    def fit(self, model, episodes):
        self.scores_ = score_table(model, episodes, self.t_obs, self.reduction)
        self.radii_ = gaussian_from_scores(self.scores_, self.delta_bar)
        return self


def fit_gaussian(model, episodes, H=None, t_obs=8, delta_bar=0.05, reduction="stacked") -> GaussianRadii:
    if H is not None and H != model.horizon:
        raise InvalidInputError(f"H={H} does not match model horizon {model.horizon}")
    return GaussianCalibrator(delta_bar, t_obs, reduction).fit(model, episodes).radii_
