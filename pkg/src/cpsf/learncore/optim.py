"""Adam and the finite-difference gradient checker."""
from __future__ import annotations

import numpy as np

from ..exceptions import TrainingDivergenceError
from .nn import ModelParams


class Adam:
    def __init__(self, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}

    def step(self, grads=None):
        grads = self.params.grads() if grads is None else grads
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, tensor in self.params.tensors.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = self.lr * (self.m[name] / corr1) / (np.sqrt(self.v[name] / corr2) + self.eps)
            tensor.data = tensor.data - update


def numerical_gradient(f, params: ModelParams, h=1e-5) -> dict:
    """Central differences of the scalar ``f()`` w.r.t. every parameter entry."""
    out = {}
    for name, tensor in params.tensors.items():
        g = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def max_relative_error(analytic: dict, numeric: dict, floor=1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradient_check(loss_fn, params: ModelParams, h=1e-5, floor=1e-6) -> float:
    """Compare ``backward`` against central differences; returns max relative error."""
    params.zero_grad()
    loss_fn().backward()
    analytic = {k: v.copy() for k, v in params.grads().items()}
    numeric = numerical_gradient(lambda: loss_fn().item(), params, h=h)
    return max_relative_error(analytic, numeric, floor=floor)
