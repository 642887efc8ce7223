from .nn import (
    ModelParams,
    forward_mlp,
    forward_recurrent,
    init_lstm,
    init_mlp,
    load_container,
    lstm_cell,
    save_container,
)
from .optim import Adam, gradient_check, max_relative_error, numerical_gradient
from .tensor import Tensor, as_tensor, concat, no_grad, stack
from .train import TrainResult, fit_minibatch

__all__ = [
    "Adam",
    "ModelParams",
    "Tensor",
    "TrainResult",
    "as_tensor",
    "concat",
    "fit_minibatch",
    "forward_mlp",
    "forward_recurrent",
    "gradient_check",
    "init_lstm",
    "init_mlp",
    "load_container",
    "lstm_cell",
    "max_relative_error",
    "no_grad",
    "numerical_gradient",
    "save_container",
    "stack",
]
