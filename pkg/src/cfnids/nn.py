"""Minimal dense-network substrate: feed-forward nets, manual backprop
(to parameters and to inputs), Adam, and binary cross entropy.

Weights and activations are float32; loss reductions accumulate in
float64. Nets can be cast to float64 for finite-difference checks.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "softmax", "identity")


class DimensionError(ValueError):
    """Input width does not match a layer of the network."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during an optimization run."""


@dataclass
class Layer:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.activation == "softmax" and i != len(self.layers) - 1:
                raise ValueError(f"layer {i}: softmax is only allowed at the output")
            if i > 0 and self.layers[i - 1].w.shape[1] != layer.w.shape[0]:
                raise DimensionError(
                    f"layer {i}: expected input width {self.layers[i - 1].w.shape[1]}, "
                    f"got {layer.w.shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].w.shape[1]

    @property
    def dtype(self):
        return self.layers[0].w.dtype

    def astype(self, dtype) -> "DenseNet":
        return DenseNet(
            [Layer(l.w.astype(dtype), l.b.astype(dtype), l.activation) for l in self.layers]
        )

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.w.copy(), l.b.copy(), l.activation) for l in self.layers])


def build_net(sizes, activations, seed, dtype=np.float32) -> DenseNet:
    """He-style uniform init (limit sqrt(6 / fan_in)), seeded."""
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        layers.append(Layer(w, b, act))
    return DenseNet(layers)


def _apply_activation(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0)
    if kind == "sigmoid":
        return sigmoid(pre)
    if kind == "softmax":
        return softmax(pre)
    return pre


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return forward_cached(net, x)[0]


def forward_cached(net: DenseNet, x: np.ndarray):
    """Forward pass keeping per-layer inputs and outputs for backprop."""
    x = np.ascontiguousarray(np.asarray(x, dtype=net.dtype))
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-d batch, got shape {x.shape}")
    inputs, outputs = [], []
    h = x
    for i, layer in enumerate(net.layers):
        if h.shape[1] != layer.w.shape[0]:
            raise DimensionError(
                f"layer {i}: expected input width {layer.w.shape[0]}, got {h.shape[1]}"
            )
        inputs.append(h)
        h = _apply_activation(h @ layer.w + layer.b, layer.activation)
        outputs.append(h)
    return h, (inputs, outputs)


def backward(net: DenseNet, x: np.ndarray, upstream_grad: np.ndarray):
    """Backprop upstream_grad (dL/d output) through the net.

    Returns ([dw0, db0, dw1, db1, ...], input_grad).
    """
    out, (inputs, outputs) = forward_cached(net, x)
    g = np.asarray(upstream_grad, dtype=net.dtype)
    if g.shape != out.shape:
        raise DimensionError(f"upstream grad shape {g.shape} != output shape {out.shape}")
    param_grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer, h_in, h_out = net.layers[i], inputs[i], outputs[i]
        if layer.activation == "relu":
            g = g * (h_out > 0)
        elif layer.activation == "sigmoid":
            g = g * h_out * (1.0 - h_out)
        elif layer.activation == "softmax":
            g = h_out * (g - np.sum(g * h_out, axis=1, keepdims=True))
        param_grads[2 * i] = h_in.T @ g
        param_grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.w.T
    return param_grads, g


def net_params(net: DenseNet) -> list[np.ndarray]:
    return [a for layer in net.layers for a in (layer.w, layer.b)]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def adam_init(params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(state: AdamState, params, grads):
    """Standard bias-corrected Adam update, applied in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise DimensionError("params/grads do not match the Adam state")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


P_CLAMP = 1e-7


def bce_loss(p, y):
    """Binary cross entropy -[y ln p + (1-y) ln(1-p)] with its dL/dp.

    p is clamped to [1e-7, 1 - 1e-7] so the loss and gradient stay finite.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = -y / p + (1.0 - y) / (1.0 - p)
    return loss, grad


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of (possibly fractional) timestep values."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(np.float32)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
