"""Tiny fully-connected networks with exact reverse-mode gradients.

Two instantiations are used elsewhere: a noise-prediction network whose
input is the data vector concatenated with the current scale alpha, and a
schedule-ratio network mapping an observation to a scalar in (0,1) through
a sigmoid head averaged over its output entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngState, read_tensor, write_tensor

__all__ = [
    "Layer",
    "MlpModel",
    "GradientTape",
    "Gradients",
    "AdamState",
    "mlp_init",
    "mlp_forward",
    "mlp_predict",
    "mlp_backward",
    "adam_step",
    "score_network",
    "ScheduleNetwork",
    "schedule_network",
    "save_model",
    "load_model",
    "parameter_checksum",
]

ACTIVATIONS = ("identity", "tanh", "sigmoid")


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {kind!r}")


def _activate_grad(out: np.ndarray, kind: str) -> np.ndarray:
    # derivative expressed through the post-activation value
    if kind == "identity":
        return np.ones_like(out)
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "sigmoid":
        return out * (1.0 - out)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (n_in, n_out)
    bias: np.ndarray  # (n_out,)
    activation: str


@dataclass
class MlpModel:
    """Feed-forward net; `conditioning` is "alpha" or "none".

    Alpha conditioning appends two derived columns, the scale itself and the
    complementary noise deviation sqrt(1 - alpha^2); the second input removes
    the square-root cusp the net would otherwise have to fit near alpha = 1.
    """

    layers: list
    conditioning: str = "none"
    version: int = 0  # bumped on every parameter update; detects stale tapes

    @property
    def input_dim(self) -> int:
        d = self.layers[0].weight.shape[0]
        return d - 2 if self.conditioning == "alpha" else d

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]


@dataclass
class GradientTape:
    inputs: list  # activation entering each layer, (B, n_in)
    outputs: list  # post-activation leaving each layer, (B, n_out)
    model: MlpModel
    version: int
    squeezed: bool


@dataclass
class Gradients:
    """Per-layer (dW, db) pairs, shapes mirroring the model parameters."""

    layers: list

    def __iter__(self):
        return iter(self.layers)


def mlp_init(sizes, activations, conditioning: str, rng: RngState) -> MlpModel:
    """Gaussian fan-in initialization; biases start at zero."""
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for i, act in enumerate(activations):
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        n_in, n_out = sizes[i], sizes[i + 1]
        w = rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)
        layers.append(Layer(w, np.zeros(n_out), act))
    return MlpModel(layers, conditioning)


def _stack_input(model: MlpModel, x: np.ndarray, alpha):
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.shape[1] != model.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != model dim {model.input_dim}")
    if model.conditioning == "alpha":
        if alpha is None:
            raise ValueError("model expects a noise-scale input")
        a = np.asarray(alpha, dtype=np.float64)
        if a.ndim == 0:
            a = np.full(x.shape[0], float(a))
        if np.any(a <= 0.0) or np.any(a >= 1.0):
            raise ValueError("conditioning scale must lie in (0, 1)")
        x = np.concatenate([x, a[:, None]], axis=1)
    return x, squeezed


def mlp_forward(model: MlpModel, x: np.ndarray, alpha=None):
    """Run the network; returns (output, tape) where the tape holds every
    intermediate needed for exact parameter gradients."""
    h, squeezed = _stack_input(model, x, alpha)
    inputs, outputs = [], []
    for layer in model.layers:
        inputs.append(h)
        h = _activate(h @ layer.weight + layer.bias, layer.activation)
        outputs.append(h)
    tape = GradientTape(inputs, outputs, model, model.version, squeezed)
    return (h[0] if squeezed else h), tape


def mlp_predict(model: MlpModel, x: np.ndarray, alpha=None) -> np.ndarray:
    """Forward pass without recording a tape (frozen-model evaluation)."""
    h, squeezed = _stack_input(model, x, alpha)
    for layer in model.layers:
        h = _activate(h @ layer.weight + layer.bias, layer.activation)
    return h[0] if squeezed else h


def mlp_backward(tape: GradientTape, dy: np.ndarray):
    """Exact reverse-mode gradients for the loss whose output-gradient is dy.

    Returns (Gradients, d_input).  Raises if the model was updated after the
    tape was recorded.
    """
    model = tape.model
    if tape.version != model.version:
        raise ValueError("stale tape: model mutated since forward")
    dy = np.asarray(dy, dtype=np.float64)
    if tape.squeezed and dy.ndim == 1:
        dy = dy[None, :]
    if dy.shape != tape.outputs[-1].shape:
        raise ValueError(f"dy shape {dy.shape} != output shape {tape.outputs[-1].shape}")
    grads = [None] * len(model.layers)
    delta = dy
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dpre = delta * _activate_grad(tape.outputs[i], layer.activation)
        grads[i] = (tape.inputs[i].T @ dpre, dpre.sum(axis=0))
        delta = dpre @ layer.weight.T
    if model.conditioning == "alpha":
        delta = delta[:, :-1]
    return Gradients(grads), (delta[0] if tape.squeezed else delta)


@dataclass
class AdamState:
    """Bias-corrected adaptive-moment optimizer state for one model."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model: MlpModel, lr: float = 1e-3) -> "AdamState":
        state = cls(lr=lr)
        for layer in model.layers:
            state.m.append((np.zeros_like(layer.weight), np.zeros_like(layer.bias)))
            state.v.append((np.zeros_like(layer.weight), np.zeros_like(layer.bias)))
        return state


def adam_step(state: AdamState, model: MlpModel, grads: Gradients) -> None:
    """Apply one update in place; bumps the model version."""
    for dw, db in grads:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise RuntimeError("diverged")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for i, (layer, (dw, db)) in enumerate(zip(model.layers, grads)):
        for buf_m, buf_v, g, param in (
            (state.m[i][0], state.v[i][0], dw, layer.weight),
            (state.m[i][1], state.v[i][1], db, layer.bias),
        ):
            buf_m *= state.beta1
            buf_m += (1.0 - state.beta1) * g
            buf_v *= state.beta2
            buf_v += (1.0 - state.beta2) * (g * g)
            param -= state.lr * (buf_m / bc1) / (np.sqrt(buf_v / bc2) + state.epsilon)
    model.version += 1


def score_network(dim: int, rng: RngState, hidden=(128, 128, 128)) -> MlpModel:
    """Noise-prediction net: input (x, alpha), three tanh blocks, linear head."""
    sizes = [dim + 1, *hidden, dim]
    acts = ["tanh"] * len(hidden) + ["identity"]
    return mlp_init(sizes, acts, "alpha", rng)


class ScheduleNetwork:
    """Maps an observation to a ratio in (0,1): sigmoid head, mean-pooled."""

    def __init__(self, mlp: MlpModel):
        if mlp.layers[-1].activation != "sigmoid":
            raise ValueError("schedule network needs a sigmoid head")
        self.mlp = mlp

    def forward(self, x: np.ndarray):
        y, tape = mlp_forward(self.mlp, x)
        return np.mean(np.atleast_2d(y), axis=1), tape

    def predict(self, x: np.ndarray):
        y = mlp_predict(self.mlp, x)
        out = np.mean(np.atleast_2d(y), axis=1)
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def backward(self, tape: GradientTape, dratio: np.ndarray) -> Gradients:
        width = self.mlp.output_dim
        dy = np.asarray(dratio, dtype=np.float64)[:, None] * np.full(width, 1.0 / width)
        grads, _ = mlp_backward(tape, dy)
        return grads


def schedule_network(dim: int, rng: RngState, hidden=(64, 64), head: int = 1) -> ScheduleNetwork:
    sizes = [dim, *hidden, head]
    acts = ["tanh"] * len(hidden) + ["sigmoid"]
    return ScheduleNetwork(mlp_init(sizes, acts, "none", rng))


def parameter_checksum(model: MlpModel) -> str:
    import hashlib

    h = hashlib.blake2s()
    for layer in model.layers:
        h.update(np.ascontiguousarray(layer.weight).tobytes())
        h.update(np.ascontiguousarray(layer.bias).tobytes())
    return h.hexdigest()


# --- checkpoint format ---------------------------------------------------
#
# Text header (kind, conditioning, layer table) followed by one tensor per
# parameter in layer order, in the shared tensor format.


def save_model(path, model, kind: str = "mlp") -> None:
    mlp = model.mlp if isinstance(model, ScheduleNetwork) else model
    if isinstance(model, ScheduleNetwork):
        kind = "ratio"
    with open(path, "w") as fh:
        fh.write(f"kind {kind}\n")
        fh.write(f"conditioning {mlp.conditioning}\n")
        fh.write(f"layers {len(mlp.layers)}\n")
        for layer in mlp.layers:
            fh.write(f"layer {layer.weight.shape[0]} {layer.weight.shape[1]} {layer.activation}\n")
        for layer in mlp.layers:
            write_tensor(fh, layer.weight)
            write_tensor(fh, layer.bias)


def load_model(path):
    with open(path) as fh:
        kind = fh.readline().split()[1]
        conditioning = fh.readline().split()[1]
        n_layers = int(fh.readline().split()[1])
        specs = []
        for _ in range(n_layers):
            tok = fh.readline().split()
            specs.append((int(tok[1]), int(tok[2]), tok[3]))
        layers = []
        for n_in, n_out, act in specs:
            w = read_tensor(fh)
            b = read_tensor(fh)
            if w.shape != (n_in, n_out) or b.shape != (n_out,):
                raise ValueError("checkpoint tensor shape disagrees with header")
            layers.append(Layer(w, b, act))
    mlp = MlpModel(layers, conditioning)
    return ScheduleNetwork(mlp) if kind == "ratio" else mlp
