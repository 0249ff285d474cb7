"""Minimal dense-network engine with manual backpropagation and Adam.

Everything runs in float64. Inputs to :func:`forward` may be a single vector
of shape ``(in_dim,)`` or a batch of row vectors of shape ``(batch, in_dim)``.

    net = init_net([1, 40, 40, 100], ["tanh", "tanh", "tanh"], seed=0)
    out, trace = forward(net, x, return_trace=True)
    tape = GradientTape.for_net(net)
    dx = backward(net, trace, upstream, tape)
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


class DimensionError(ValueError):
    """Raised when an array does not have the shape a layer expects."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class TraceError(RuntimeError):
    """Raised when backward is called without a matching forward trace."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by :func:`adam_step` when a gradient holds NaN or Inf."""


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    TANH = "tanh"
    SELU = "selu"
    RELU = "relu"

    def apply(self, z):
        if self is Activation.IDENTITY:
            return z
        if self is Activation.TANH:
            return np.tanh(z)
        if self is Activation.SELU:
            # expm1 on the clipped branch avoids overflow warnings for large z
            return SELU_LAMBDA * np.where(z > 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))
        return np.maximum(z, 0.0)

    def derivative(self, z, a):
        """d activation / dz given pre-activation ``z`` and output ``a``."""
        if self is Activation.IDENTITY:
            return np.ones_like(z)
        if self is Activation.TANH:
            return 1.0 - a * a
        if self is Activation.SELU:
            # for z <= 0: a = lam*alpha*(e^z - 1), so da/dz = a + lam*alpha
            return np.where(z > 0, SELU_LAMBDA, a + SELU_LAMBDA * SELU_ALPHA)
        return (z > 0).astype(np.float64)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def parameter_count(self) -> int:
        return self.out_dim * (self.in_dim + 1)


@dataclass
class DenseNet:
    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a DenseNet needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i - 1].out_dim != self.layers[i].in_dim:
                raise DimensionError(
                    f"layer {i - 1} outputs {self.layers[i - 1].out_dim} values but "
                    f"layer {i} expects {self.layers[i].in_dim}",
                    layer_index=i,
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...); updated in place."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def __call__(self, x):
        return forward(self, x)


@dataclass
class Trace:
    """Values cached by a forward pass and consumed by :func:`backward`."""

    net_id: int
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations
    post: list[np.ndarray]  # activations (post[-1] is the network output)
    squeezed: bool


@dataclass
class GradientTape:
    """Gradient buffers shaped like a network's parameters."""

    grads: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: DenseNet) -> "GradientTape":
        return cls([np.zeros_like(p) for p in net.parameters()])

    def zero(self):
        for g in self.grads:
            g.fill(0.0)

    def arrays(self) -> list[np.ndarray]:
        return self.grads

    def layer_grads(self, i):
        return self.grads[2 * i], self.grads[2 * i + 1]


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise DimensionError(
            f"layer 0 expects input of length {net.in_dim}, got shape {x.shape}",
            layer_index=0,
        )
    return x, squeezed


def forward(net: DenseNet, x, return_trace: bool = False):
    """Evaluate ``net`` on ``x``.

    With ``return_trace=True`` also returns the :class:`Trace` needed by
    :func:`backward`.
    """
    h, squeezed = _as_batch(net, x)
    if return_trace:
        inputs, pre, post = [], [], []
    for layer in net.layers:
        z = h @ layer.weights.T
        z += layer.bias
        a = layer.activation.apply(z)
        if return_trace:
            inputs.append(h)
            pre.append(z)
            post.append(a)
        h = a
    out = h[0] if squeezed else h
    if return_trace:
        return out, Trace(id(net), inputs, pre, post, squeezed)
    return out


def backward(net: DenseNet, trace: Trace, upstream, tape: GradientTape):
    """Accumulate parameter gradients into ``tape`` and return d(loss)/d(input).

    ``upstream`` is d(loss)/d(output) with the same shape as the forward output.
    Gradients are summed over the batch.
    """
    if trace is None or not isinstance(trace, Trace):
        raise TraceError("backward called without a forward trace")
    if trace.net_id != id(net) or len(trace.pre) != len(net.layers):
        raise TraceError("trace was produced by a different network")
    g = np.asarray(upstream, dtype=np.float64)
    if trace.squeezed:
        g = g[None, :]
    if g.shape != trace.post[-1].shape:
        raise DimensionError(
            f"upstream gradient shape {g.shape} does not match output shape "
            f"{trace.post[-1].shape}",
            layer_index=len(net.layers) - 1,
        )
    if len(tape.grads) != 2 * len(net.layers):
        raise DimensionError("gradient tape does not match the network")
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation is not Activation.IDENTITY:
            g = g * layer.activation.derivative(trace.pre[i], trace.post[i])
        gw, gb = tape.layer_grads(i)
        gw += g.T @ trace.inputs[i]
        gb += g.sum(axis=0)
        g = g @ layer.weights
    return g[0] if trace.squeezed else g


def init_net(sizes: Sequence[int], activations, seed=0, rng=None) -> DenseNet:
    """Build a network with layer widths ``sizes`` (input first).

    ``activations`` is one name per layer, or a single name for all layers.
    Weights are uniform: +-sqrt(3/in) for SELU layers (unit-variance
    propagation), +-sqrt(6/(in+out)) otherwise. Biases start at zero.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output size")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    n_layers = len(sizes) - 1
    if isinstance(activations, (str, Activation)):
        activations = [activations] * n_layers
    activations = [Activation(a) for a in activations]
    if len(activations) != n_layers:
        raise ValueError(f"expected {n_layers} activations, got {len(activations)}")
    if rng is None:
        rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        if act is Activation.SELU:
            bound = math.sqrt(3.0 / fan_in)
        else:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return DenseNet(layers)


@dataclass
class AdamState:
    """Adam moments plus a step-decayed learning rate.

    lr(t) = base_lr * decay_rate ** floor(t / decay_steps), where t is the
    number of steps already taken.
    """

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    base_lr: float = 1e-3
    decay_rate: float = 0.9
    decay_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kwargs,
        )

    def learning_rate(self, step=None) -> float:
        t = self.step if step is None else step
        return self.base_lr * self.decay_rate ** (t // self.decay_steps)


def adam_step(params, grads, state: AdamState):
    """Apply one Adam update in place.

    ``grads`` may be a list of arrays or anything with an ``arrays()`` method
    (a :class:`GradientTape`). Raises :class:`NonFiniteGradientError` and
    leaves everything untouched if any gradient is not finite.
    """
    if hasattr(grads, "arrays"):
        grads = grads.arrays()
    if len(grads) != len(params) or len(state.m) != len(params):
        raise DimensionError("parameters, gradients and optimizer state differ in length")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient in parameter array {i} at step {state.step}"
            )
    lr = state.learning_rate()
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
