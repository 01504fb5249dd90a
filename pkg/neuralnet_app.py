from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from domain_app import ConfigError, ShapeError, TapeError, check_schema

log = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "relu", "softplus", "sigmoid", "softmax")
CHECKPOINT_VERSION = 1


# ---
# Activations, all numerically stable for |z| up to several hundred


def softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def bce_with_logits(z, y):
    """Elementwise binary cross-entropy on logits: softplus(z) - y*z."""
    return softplus(z) - y * z


def _activate(kind, z):
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "softplus":
        return softplus(z)
    if kind == "sigmoid":
        return sigmoid(z)
    return softmax(z)


def _activation_grad(kind, z, a, g):
    """Pull upstream gradient g (w.r.t. activation a) back to pre-activation z."""
    if kind == "identity":
        return g
    if kind == "relu":
        return g * (z > 0.0)
    if kind == "softplus":
        return g * sigmoid(z)
    if kind == "sigmoid":
        return g * a * (1.0 - a)
    return a * (g - (g * a).sum(axis=-1, keepdims=True))


# ---
# Layers


@dataclass
class DenseLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"layer shapes W{self.W.shape} b{self.b.shape} are inconsistent")

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]


@dataclass
class Mlp:
    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an Mlp needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        if len(params) != 2 * len(self.layers):
            raise ShapeError("parameter list does not match layer count")
        layers = []
        for i, layer in enumerate(self.layers):
            W, b = params[2 * i], params[2 * i + 1]
            if W.shape != layer.W.shape or b.shape != layer.b.shape:
                raise ShapeError(f"parameter shape mismatch at layer {i}")
            layers.append(DenseLayer(W.copy(), b.copy(), layer.activation))
        return Mlp(layers)

    def copy(self) -> "Mlp":
        return self.with_params(self.params())


def init_mlp(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> Mlp:
    """He-uniform for relu layers, Glorot-uniform otherwise; biases start at zero."""
    if len(activations) != len(sizes) - 1:
        raise ConfigError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
        if act == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(W, np.zeros(fan_out), act))
    return Mlp(layers)


# ---
# Forward / backward


@dataclass
class Tape:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    squeeze: bool
    shapes: tuple


def _shapes(mlp: Mlp):
    return tuple(layer.W.shape for layer in mlp.layers) + tuple(layer.activation for layer in mlp.layers)


def forward(mlp: Mlp, x) -> tuple[np.ndarray, Tape]:
    """Run x (a vector or a batch with samples in rows) through the net."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    if h.ndim != 2 or h.shape[1] != mlp.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match input dim {mlp.in_dim}")
    inputs, pre, post = [], [], []
    for layer in mlp.layers:
        inputs.append(h)
        z = h @ layer.W.T + layer.b
        h = _activate(layer.activation, z)
        pre.append(z)
        post.append(h)
    out = h[0] if squeeze else h
    return out, Tape(inputs, pre, post, squeeze, _shapes(mlp))


def backward(mlp: Mlp, tape: Tape, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of sum(upstream * output): parameter grads in params() order, plus input grad."""
    if tape.shapes != _shapes(mlp) or len(tape.pre) != len(mlp.layers):
        raise TapeError("tape was recorded on a different network")
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if g.shape != tape.post[-1].shape:
        raise TapeError(f"upstream gradient shape {g.shape} != output shape {tape.post[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(mlp.layers))
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        dz = _activation_grad(layer.activation, tape.pre[i], tape.post[i], g)
        grads[2 * i] = dz.T @ tape.inputs[i]
        grads[2 * i + 1] = dz.sum(axis=0)
        g = dz @ layer.W
    dx = g[0] if tape.squeeze else g
    return grads, dx


# ---
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Sequence[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params, grads, state: AdamState):
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam state must align")
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_params, new_state


# ---
# Finite-difference gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error) if self.max_rel_error else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def relative_error(a, n, floor=1e-6):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def grad_check_params(
    params: list[np.ndarray],
    loss_and_grads: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
    tolerance: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central differences, entry by entry."""
    _, analytic = loss_and_grads(params)
    errors = []
    for pi, p in enumerate(params):
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            bumped = [q.copy() for q in params]
            bumped[pi][idx] = p[idx] + h
            up, _ = loss_and_grads(bumped)
            bumped[pi][idx] = p[idx] - h
            down, _ = loss_and_grads(bumped)
            numeric[idx] = (up - down) / (2.0 * h)
        errors.append(float(relative_error(analytic[pi], numeric).max()) if p.size else 0.0)
    return GradCheckReport(errors, tolerance)


def grad_check(
    mlp: Mlp,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    backward_fn=None,
) -> GradCheckReport:
    """loss_fn maps the network output to (loss, dloss/doutput)."""
    backward_fn = backward_fn or backward

    def loss_and_grads(params):
        net = mlp.with_params(params)
        out, tape = forward(net, x)
        loss, dout = loss_fn(out)
        grads, _ = backward_fn(net, tape, dout)
        return loss, grads

    return grad_check_params(mlp.params(), loss_and_grads, tolerance, h)


# ---
# Checkpoint codec

MLP_SCHEMA = {
    "type": "object",
    "required": ["version", "layers"],
    "properties": {
        "version": {"const": CHECKPOINT_VERSION},
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["shape", "W", "b", "activation"],
                "properties": {
                    "shape": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                    "W": {"type": "array", "items": {"type": "number"}},
                    "b": {"type": "array", "items": {"type": "number"}},
                    "activation": {"enum": list(ACTIVATIONS)},
                },
            },
        },
    },
}


def mlp_to_dict(mlp: Mlp) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "layers": [
            {
                "shape": list(layer.W.shape),
                "W": layer.W.ravel().tolist(),
                "b": layer.b.tolist(),
                "activation": layer.activation,
            }
            for layer in mlp.layers
        ],
    }


def mlp_from_dict(doc: dict) -> Mlp:
    check_schema(doc, MLP_SCHEMA, "network checkpoint")
    layers = []
    for entry in doc["layers"]:
        rows, cols = entry["shape"]
        W = np.asarray(entry["W"], dtype=np.float64)
        if W.size != rows * cols:
            raise ShapeError(f"checkpoint layer has {W.size} weights, expected {rows}x{cols}")
        layers.append(DenseLayer(W.reshape(rows, cols), np.asarray(entry["b"]), entry["activation"]))
    return Mlp(layers)
