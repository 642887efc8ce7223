"""Parameter containers and the two model families: tanh MLPs and stacked LSTMs."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..exceptions import CPSFError, ShapeError
from .tensor import Tensor, as_tensor, concat

SCHEMA_VERSION = 1


class ModelParams:
    """Named parameter tensors plus a JSON-able topology descriptor.

    Parameters keep their insertion order; that order fixes the optimizer
    state layout and the serialized form.
    """

    def __init__(self, topology: dict, arrays: dict):
        self.topology = dict(topology)
        self.tensors = {
            name: Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=name)
            for name, arr in arrays.items()
        }

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self):
        return list(self.tensors)

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def grads(self) -> dict:
        return {
            k: (np.zeros_like(t.data) if t.grad is None else t.grad)
            for k, t in self.tensors.items()
        }

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.topology, {k: v.copy() for k, v in self.arrays().items()})

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "topology": self.topology,
            # keys are sorted on disk; keep the insertion order explicitly
            "order": list(self.tensors),
            "params": {
                k: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                for k, t in self.tensors.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise CPSFError(f"unsupported model schema_version {d.get('schema_version')}")
        order = d.get("order", list(d["params"]))
        arrays = {
            k: np.array(d["params"][k]["data"], dtype=np.float64).reshape(d["params"][k]["shape"])
            for k in order
        }
        return cls(d["topology"], arrays)


def dumps(obj: dict) -> str:
    # repr-based float formatting makes the round trip bit-exact
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save_container(path, payload: dict):
    Path(path).write_text(dumps(payload) + "\n")


def load_container(path) -> dict:
    return json.loads(Path(path).read_text())


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# -- multilayer perceptron ---------------------------------------------------


def init_mlp(sizes, rng, zero_last=False) -> ModelParams:
    arrays = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        arrays[f"W{i}"] = (
            np.zeros((n_in, n_out)) if (last and zero_last) else _glorot(rng, n_in, n_out, (n_in, n_out))
        )
        arrays[f"b{i}"] = np.zeros(n_out)
    return ModelParams({"kind": "mlp", "sizes": list(sizes)}, arrays)


def forward_mlp(params: ModelParams, x) -> Tensor:
    """Affine + tanh hidden layers, linear output layer."""
    sizes = params.topology["sizes"]
    x = as_tensor(x)
    if x.shape[-1] != sizes[0]:
        raise ShapeError(f"input shape {x.shape} does not match MLP input size {sizes[0]}")
    n_layers = len(sizes) - 1
    h = x
    for i in range(n_layers):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        if i < n_layers - 1:
            h = h.tanh()
    return h


# -- stacked LSTM with linear head -------------------------------------------


def init_lstm(n_in, hidden, n_layers, n_out, rng, forget_bias=1.0) -> ModelParams:
    arrays = {}
    width = n_in
    for layer in range(n_layers):
        arrays[f"lstm{layer}_W"] = _glorot(rng, width + hidden, 4 * hidden, (width + hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = forget_bias
        arrays[f"lstm{layer}_b"] = b
        width = hidden
    arrays["head_W"] = _glorot(rng, hidden, n_out, (hidden, n_out))
    arrays["head_b"] = np.zeros(n_out)
    topo = {"kind": "lstm", "n_in": n_in, "hidden": hidden, "layers": n_layers, "n_out": n_out}
    return ModelParams(topo, arrays)


def lstm_cell(W, b, x, h, c, hidden):
    """One gated update; gate order in the packed weights is i, f, g, o."""
    z = concat([x, h], axis=-1) @ W + b
    i = z[:, :hidden].sigmoid()
    f = z[:, hidden : 2 * hidden].sigmoid()
    g = z[:, 2 * hidden : 3 * hidden].tanh()
    o = z[:, 3 * hidden :].sigmoid()
    c = f * c + i * g
    h = o * c.tanh()
    return h, c


def forward_recurrent(params: ModelParams, sequence):
    """Run the stack over ``sequence`` of shape (batch, length, n_in).

    Returns ``(hidden_seq, output)`` where ``hidden_seq`` is the list of
    top-layer hidden states and ``output`` is the head applied to the last.
    """
    topo = params.topology
    seq = as_tensor(sequence)
    if seq.ndim != 3 or seq.shape[2] != topo["n_in"]:
        raise ShapeError(f"sequence shape {seq.shape} does not match (batch, length, {topo['n_in']})")
    if seq.shape[1] < 1:
        raise ShapeError("sequence length must be >= 1")
    batch, length = seq.shape[0], seq.shape[1]
    hidden = topo["hidden"]
    inputs = [seq[:, t, :] for t in range(length)]
    for layer in range(topo["layers"]):
        W, b = params[f"lstm{layer}_W"], params[f"lstm{layer}_b"]
        h = Tensor(np.zeros((batch, hidden)))
        c = Tensor(np.zeros((batch, hidden)))
        outs = []
        for x in inputs:
            h, c = lstm_cell(W, b, x, h, c, hidden)
            outs.append(h)
        inputs = outs
    out = inputs[-1] @ params["head_W"] + params["head_b"]
    return inputs, out
