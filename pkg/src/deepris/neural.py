"""Fully-connected tanh detector with hand-written backpropagation and Adam.

Layer ``i`` maps ``h -> act(W_i h + b_i)``. Hidden layers use tanh (ReLU is
available for comparison); the output layer is ``z * tanh(.)`` so estimates
stay inside the constellation's amplitude range ``[-z, z]``. A single
inverted-dropout mask follows the last hidden layer during training.

Arrays are batch-major: inputs have shape (B, dims[0]).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_HIDDEN = (500, 250, 100)


class StaleCacheError(RuntimeError):
    """A forward cache was used after the parameters it came from changed."""


@dataclass
class MlpParams:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_scale: float = 1 / np.sqrt(2)
    activation: str = "tanh"
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and bias per layer transition")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i + 1], self.layer_dims[i])
            if W.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: expected W{shape}, b({shape[0]},); "
                                 f"got W{W.shape}, b{b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def weight_sq_sum(self) -> float:
        return float(sum(np.sum(W * W) for W in self.weights))

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_dims), [W.copy() for W in self.weights],
                         [b.copy() for b in self.biases], self.output_scale, self.activation)

    def equals(self, other: "MlpParams") -> bool:
        """Bit-for-bit comparison of shapes, weights, biases and scale."""
        return (self.layer_dims == other.layer_dims
                and self.output_scale == other.output_scale
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))


def _tanh_grad(a, h):
    return 1.0 - h * h


def _relu(a):
    return np.maximum(0.0, a)


def _relu_grad(a, h):
    return (a > 0).astype(a.dtype)


ACTIVATIONS = {"tanh": (np.tanh, _tanh_grad), "relu": (_relu, _relu_grad)}


def init_mlp(layer_dims, rng: np.random.Generator, output_scale: float = 1 / np.sqrt(2),
             activation: str = "tanh") -> MlpParams:
    """Zero biases, fan-balanced uniform weights U(-a, a), a = sqrt(6 / (fan_in + fan_out))."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"invalid layer dims {layer_dims!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(dims, weights, biases, float(output_scale), activation)


@dataclass
class TrainMode:
    """Forward-pass mode with dropout; ``p_drop`` is the drop probability."""

    p_drop: float
    rng: np.random.Generator

    def __post_init__(self):
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    mask: Optional[np.ndarray]
    params_id: int
    version: int
    squeeze: bool


def forward(p: MlpParams, inputs, mode: Optional[TrainMode] = None):
    """Run the network. ``mode=None`` is inference (no dropout).

    Returns:
        (outputs, cache). Outputs have the batch shape of ``inputs``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != p.layer_dims[0]:
        raise ValueError(f"input width {x.shape[-1]} != {p.layer_dims[0]}")
    act, _ = ACTIVATIONS[p.activation]
    pre, post = [], []
    mask = None
    h = x
    last = p.n_layers - 1
    for i, (W, b) in enumerate(zip(p.weights, p.biases)):
        a = h @ W.T + b
        h = np.tanh(a) if i == last else act(a)
        pre.append(a)
        post.append(h)
        if i == last - 1 and mode is not None and mode.p_drop > 0:
            keep = 1.0 - mode.p_drop
            mask = (mode.rng.random(h.shape) < keep) / keep
            h = h * mask
    out = p.output_scale * h
    cache = ForwardCache(x, pre, post, mask, id(p), p.version, squeeze)
    return (out[0] if squeeze else out), cache


@dataclass(frozen=True)
class LossValue:
    total: float
    mse_part: float
    l2_part: float


def loss(output, target, p: MlpParams, lam: float) -> LossValue:
    """Batch-mean squared error norm plus ``lam`` times the squared weights."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    output = np.atleast_2d(np.asarray(output, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if output.shape != target.shape:
        raise ValueError(f"output shape {output.shape} != target shape {target.shape}")
    diff = output - target
    mse = float(np.sum(diff * diff) / output.shape[0])
    l2 = lam * p.weight_sq_sum()
    return LossValue(mse + l2, mse, l2)


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def backward(p: MlpParams, cache: ForwardCache, target, lam: float) -> Gradients:
    if cache.params_id != id(p) or cache.version != p.version:
        raise StaleCacheError("forward cache does not match the current parameters")
    t = np.asarray(target, dtype=np.float64)
    if cache.squeeze:
        t = t[None, :]
    B = cache.inputs.shape[0]
    _, act_grad = ACTIVATIONS[p.activation]
    last = p.n_layers - 1
    z = p.output_scale

    out = z * cache.post[last]
    if t.shape != out.shape:
        raise ValueError(f"target shape {t.shape} != output shape {out.shape}")
    delta = (2.0 / B) * (out - t) * z * _tanh_grad(cache.pre[last], cache.post[last])

    gw = [None] * p.n_layers
    gb = [None] * p.n_layers
    for i in range(last, -1, -1):
        if i == 0:
            h_in = cache.inputs
        else:
            h_in = cache.post[i - 1]
            if i - 1 == last - 1 and cache.mask is not None:
                h_in = h_in * cache.mask
        gw[i] = delta.T @ h_in + 2.0 * lam * p.weights[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            dh = delta @ p.weights[i]
            if i - 1 == last - 1 and cache.mask is not None:
                dh = dh * cache.mask
            delta = dh * act_grad(cache.pre[i - 1], cache.post[i - 1])
    return Gradients(gw, gb)


@dataclass
class AdamState:
    """Moment estimates for Adam.

    With ``bias_correction`` off (the default) the update is
    ``theta -= lr * m / sqrt(v + eps)`` using the raw moving averages.
    """

    m_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_w: list[np.ndarray]
    v_b: list[np.ndarray]
    lr: float = 0.01
    delta1: float = 0.9
    delta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = False
    step: int = 0

    @classmethod
    def zeros_like(cls, p: MlpParams, **kw) -> "AdamState":
        return cls([np.zeros_like(W) for W in p.weights], [np.zeros_like(b) for b in p.biases],
                   [np.zeros_like(W) for W in p.weights], [np.zeros_like(b) for b in p.biases],
                   **kw)


def _adam_update(theta, g, m, v, s: AdamState, c1: float, c2: float):
    m *= s.delta1
    m += (1.0 - s.delta1) * g
    v *= s.delta2
    v += (1.0 - s.delta2) * (g * g)
    if s.bias_correction:
        theta -= s.lr * (m / c1) / np.sqrt(v / c2 + s.eps)
    else:
        theta -= s.lr * m / np.sqrt(v + s.eps)


def adam_step(p: MlpParams, grads: Gradients, s: AdamState):
    """Apply one Adam update in place and return ``(p, s)``."""
    s.step += 1
    c1 = 1.0 - s.delta1 ** s.step
    c2 = 1.0 - s.delta2 ** s.step
    for i in range(p.n_layers):
        _adam_update(p.weights[i], grads.weights[i], s.m_w[i], s.v_w[i], s, c1, c2)
        _adam_update(p.biases[i], grads.biases[i], s.m_b[i], s.v_b[i], s, c1, c2)
    p.version += 1
    return p, s
