"""Deterministic mini-batch training loop shared by the predictor and the filter."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import TrainingDivergenceError
from .nn import ModelParams
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)


def fit_minibatch(
    params: ModelParams,
    batch_loss,
    n_train: int,
    *,
    val_loss=None,
    epochs=20,
    batch_size=256,
    lr=1e-3,
    rng=None,
    on_epoch_end=None,
) -> TrainResult:
    """Minimize ``batch_loss(indices) -> Tensor`` with Adam.

    Batches are drawn from a per-epoch permutation of ``range(n_train)``
    produced by ``rng``, so a fixed seed gives bit-identical training.
    ``val_loss()`` (a float) selects the returned checkpoint.  A non-finite
    training loss aborts with :class:`TrainingDivergenceError`; the last
    finite checkpoint is attached to the exception as ``.checkpoint``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    opt = Adam(params, lr=lr)
    best = params.copy()
    best_val = math.inf
    best_epoch = -1
    result = TrainResult(params=best, best_epoch=-1)
    for epoch in range(epochs):
        order = rng.permutation(n_train)
        total, count = 0.0, 0
        for start in range(0, n_train, batch_size):
            idx = order[start : start + batch_size]
            params.zero_grad()
            loss = batch_loss(idx)
            value = loss.item()
            if not math.isfinite(value):
                err = TrainingDivergenceError(f"non-finite training loss at epoch {epoch}")
                err.checkpoint = best
                raise err
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        train_value = total / max(count, 1)
        result.train_curve.append(train_value)
        val_value = train_value if val_loss is None else float(val_loss())
        result.val_curve.append(val_value)
        log.info("epoch %d train %.6g val %.6g", epoch, train_value, val_value)
        if val_value < best_val:
            best_val = val_value
            best = params.copy()
            best_epoch = epoch
        if on_epoch_end is not None:
            on_epoch_end(epoch, train_value, val_value)
    result.params = best
    result.best_epoch = best_epoch
    return result
