"""Feed-forward network, hand-written reverse-mode gradients and SGD with momentum.

Arrays are plain ``numpy.ndarray`` objects (row-major, float32 or float64).
A network is an ordered list of dense layers; hidden layers use ReLU and the
last layer is linear so its output can be fed straight into the
cross-entropy loss.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError

ACTIVATIONS = ("relu", "identity")

#: A gradient set is one array per parameter, in ``MLPNetwork.parameters()`` order.
GradientSet = List[np.ndarray]


@dataclass
class Layer:
    weights: np.ndarray  # [in, out]
    bias: np.ndarray  # [out]
    activation: str = "relu"

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class MLPNetwork:
    layers: List[Layer]
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float32))

    def __post_init__(self):
        self.dtype = np.dtype(self.dtype)
        if not self.layers:
            raise ConfigurationError("network needs at least one layer")
        for k, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {layer.activation!r}")
            if layer.weights.ndim != 2 or layer.bias.shape != (layer.fan_out,):
                raise ShapeError(f"layer {k}: weights {layer.weights.shape} / bias {layer.bias.shape}")
            if k and self.layers[k - 1].fan_out != layer.fan_in:
                raise ShapeError(
                    f"layer {k} expects {layer.fan_in} inputs, previous layer gives {self.layers[k - 1].fan_out}"
                )
        if self.layers[-1].activation != "identity":
            raise ConfigurationError("final layer must be linear (identity activation)")

    @property
    def layer_sizes(self) -> List[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def parameters(self) -> List[np.ndarray]:
        params = []
        for layer in self.layers:
            params.append(layer.weights)
            params.append(layer.bias)
        return params

    def copy(self) -> "MLPNetwork":
        return MLPNetwork(
            [Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.dtype,
        )

    def astype(self, dtype) -> "MLPNetwork":
        dtype = np.dtype(dtype)
        return MLPNetwork(
            [Layer(l.weights.astype(dtype), l.bias.astype(dtype), l.activation) for l in self.layers],
            dtype,
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def init_network(layer_sizes: Sequence[int], seed: int, dtype=np.float32) -> MLPNetwork:
    """Build an MLP with He-style uniform weights and zero biases.

    Weights of a layer with ``fan_in`` inputs are drawn from
    ``U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))`` using a generator seeded by
    ``seed``; the same seed always gives the same network.
    """
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ConfigurationError(f"layer_sizes needs input and output sizes, got {sizes}")
    if any(int(s) != s or s < 1 for s in sizes):
        raise ConfigurationError(f"layer sizes must be positive integers, got {sizes}")
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"unsupported dtype {dtype}")
    rng = np.random.default_rng(seed)
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        activation = "identity" if k == len(sizes) - 2 else "relu"
        layers.append(Layer(w, b, activation))
    return MLPNetwork(layers, dtype)


def _check_input(net: MLPNetwork, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != net.layers[0].fan_in:
        raise ShapeError(f"input of shape {x.shape} does not fit a network expecting {net.layers[0].fan_in} features")
    return x.astype(net.dtype, copy=False)


def _forward_cached(net: MLPNetwork, x: np.ndarray):
    # keeps each layer's input and pre-activation for the backward sweep
    inputs, pre = [], []
    h = x
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.weights + layer.bias
        pre.append(z)
        h = np.maximum(z, 0) if layer.activation == "relu" else z
    return h, inputs, pre


def forward(net: MLPNetwork, x: np.ndarray) -> np.ndarray:
    """Logits ``[B, C]`` for a batch ``x`` of shape ``[B, d]``."""
    logits, _, _ = _forward_cached(net, _check_input(net, x))
    return logits


def softmax_cross_entropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    The loss is accumulated in float64 regardless of the logits' dtype; the
    gradient is returned in the logits' dtype. Rows are shifted by their max
    before exponentiation, so saturated logits stay finite.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n == 0:
        raise ShapeError("empty batch")
    if labels.dtype.kind not in "iu":
        if not np.all(np.mod(labels, 1) == 0):
            raise DataError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")

    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))

    probs = np.exp(z - log_norm[:, None])
    probs[rows, labels] -= 1.0
    dlogits = (probs / n).astype(logits.dtype if logits.dtype.kind == "f" else np.float64)
    return loss, dlogits


def backward(net: MLPNetwork, x: np.ndarray, labels) -> Tuple[float, GradientSet]:
    """Loss and exact gradients of the mean batch loss for every parameter.

    The network is not modified. Gradients come back in
    ``net.parameters()`` order (weights, bias, weights, bias, ...).
    """
    x = _check_input(net, x)
    logits, inputs, pre = _forward_cached(net, x)
    loss, delta = softmax_cross_entropy(logits, labels)

    grads: GradientSet = [None] * (2 * len(net.layers))
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation == "relu":
            delta = delta * (pre[k] > 0)
        grads[2 * k] = inputs[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k:
            delta = delta @ layer.weights.T
    return loss, grads


@dataclass
class OptimizerState:
    velocity: List[np.ndarray]
    learning_rate: float = 0.005
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def zeros_like(cls, net: MLPNetwork, learning_rate: float = 0.005, momentum: float = 0.9) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in net.parameters()], learning_rate, momentum)


def sgd_momentum_step(net: MLPNetwork, grads: GradientSet, state: OptimizerState):
    """One heavy-ball update, in place: ``v = mu*v + g``; ``w = w - lr*v``.

    Returns ``(net, state)`` for convenience; both are the objects passed in.
    """
    params = net.parameters()
    if len(grads) != len(params) or len(state.velocity) != len(params):
        raise ShapeError(
            f"{len(params)} parameters, {len(grads)} gradients, {len(state.velocity)} velocity buffers"
        )
    lr = net.dtype.type(state.learning_rate)
    mu = net.dtype.type(state.momentum)
    for p, g, v in zip(params, grads, state.velocity):
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} / velocity {v.shape} do not match parameter {p.shape}")
        v *= mu
        v += g
        p -= lr * v
    return net, state
