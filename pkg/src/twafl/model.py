"""Dense feed-forward classifier trained with plain mini-batch SGD.

Convolutional and recurrent layers exist only as count-only descriptors so the
parameter arithmetic of the reference CNN/LSTM architectures can be checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .params import LayeredParams, ParamBlock, StructureError

LayerKind = Literal["dense_trainable", "conv_count_only", "lstm_count_only"]
Activation = Literal["relu", "softmax", "none"]


class UnsupportedSpecError(ValueError):
    """A count-only layer was handed to a training operation."""


@dataclass(frozen=True)
class LayerDesc:
    kind: LayerKind
    shape: tuple[int, ...]
    activation: Activation = "relu"
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if any(s < 1 for s in self.shape):
            raise StructureError(f"layer shape entries must be >= 1: {self.shape}")
        expected = {"dense_trainable": 2, "conv_count_only": 4, "lstm_count_only": 2}[self.kind]
        if len(self.shape) != expected:
            raise StructureError(f"{self.kind} layer needs a {expected}-d shape, got {self.shape}")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Weight/bias tensor shapes in Keras order."""
        if self.kind == "dense_trainable":
            fan_in, fan_out = self.shape
            return [("kernel", (fan_in, fan_out)), ("bias", (fan_out,))]
        if self.kind == "conv_count_only":
            return [("kernel", self.shape), ("bias", (self.shape[-1],))]
        # input width x units; gates stacked along the last axis
        n_in, units = self.shape
        return [
            ("kernel", (n_in, 4 * units)),
            ("recurrent_kernel", (units, 4 * units)),
            ("bias", (4 * units,)),
        ]


@dataclass(frozen=True)
class ModelSpec:
    """Layer stack plus the shallow/deep boundary, counted in layers."""

    layers: tuple[LayerDesc, ...]
    input_dim: int
    num_classes: int
    split_index: int

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not 0 < self.split_index < len(layers):
            raise StructureError(
                f"split_index must fall strictly inside the {len(layers)}-layer stack"
            )
        # conv -> dense flattening depends on pooling, so only dense chains are checked
        for prev, nxt in zip(layers, layers[1:]):
            if prev.kind != "conv_count_only" and nxt.kind != "conv_count_only":
                if prev.shape[-1] != nxt.shape[0]:
                    raise StructureError(
                        f"fan_out {prev.shape[-1]} of {prev.name or prev.kind} does not feed "
                        f"fan_in {nxt.shape[0]} of {nxt.name or nxt.kind}"
                    )
        if layers[0].kind == "dense_trainable" and layers[0].shape[0] != self.input_dim:
            raise StructureError(
                f"first layer fan_in {layers[0].shape[0]} != input_dim {self.input_dim}"
            )
        if layers[-1].shape[-1] != self.num_classes:
            raise StructureError(
                f"final layer fan_out {layers[-1].shape[-1]} != num_classes {self.num_classes}"
            )

    @property
    def trainable(self) -> bool:
        return all(layer.kind == "dense_trainable" for layer in self.layers)

    @property
    def block_split(self) -> int:
        """Index of the first deep parameter block."""
        return sum(len(layer.param_shapes()) for layer in self.layers[: self.split_index])


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise StructureError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.labels.shape[0]


def dense_spec(input_dim: int, hidden: Sequence[int], num_classes: int,
               split_index: int = 1) -> ModelSpec:
    dims = [input_dim, *hidden, num_classes]
    layers = tuple(
        LayerDesc("dense_trainable", (a, b),
                  "softmax" if i == len(dims) - 2 else "relu", f"dense_{i + 1}")
        for i, (a, b) in enumerate(zip(dims, dims[1:]))
    )
    return ModelSpec(layers, input_dim, num_classes, split_index)


def mnist_cnn_spec(split_index: int = 2) -> ModelSpec:
    """Two 5x5 conv layers (32, 64 channels), dense 1024->512, dense 512->10."""
    layers = (
        LayerDesc("conv_count_only", (5, 5, 1, 32), "relu", "conv2d_1"),
        LayerDesc("conv_count_only", (5, 5, 32, 64), "relu", "conv2d_2"),
        LayerDesc("dense_trainable", (1024, 512), "relu", "dense_1"),
        LayerDesc("dense_trainable", (512, 10), "softmax", "dense_2"),
    )
    return ModelSpec(layers, 28 * 28, 10, split_index)


def har_lstm_spec(split_index: int = 2) -> ModelSpec:
    """Two stacked 25-unit LSTMs on 9 input channels, dense 25->256, dense 256->6."""
    layers = (
        LayerDesc("lstm_count_only", (9, 25), "none", "lstm_1"),
        LayerDesc("lstm_count_only", (25, 25), "none", "lstm_2"),
        LayerDesc("dense_trainable", (25, 256), "relu", "dense_1"),
        LayerDesc("dense_trainable", (256, 6), "softmax", "dense_2"),
    )
    return ModelSpec(layers, 9 * 128, 6, split_index)


def param_count(spec: ModelSpec) -> list[tuple[str, int]]:
    out = []
    for i, layer in enumerate(spec.layers):
        name = layer.name or f"layer_{i + 1}"
        for part, shape in layer.param_shapes():
            out.append((f"{name}/{part}", int(np.prod(shape))))
    return out


def zeros_params(spec: ModelSpec) -> LayeredParams:
    """All-zero container laid out like the ModelSpec; count-only layers allowed."""
    blocks = []
    for i, layer in enumerate(spec.layers):
        for _, shape in layer.param_shapes():
            blocks.append(ParamBlock(i, shape, np.zeros(int(np.prod(shape)))))
    return LayeredParams(tuple(blocks), spec.block_split)


def _require_trainable(spec: ModelSpec) -> None:
    if not spec.trainable:
        bad = [l.name or l.kind for l in spec.layers if l.kind != "dense_trainable"]
        raise UnsupportedSpecError(f"count-only layers cannot be trained: {bad}")


def init_params(spec: ModelSpec, rng: np.random.Generator) -> LayeredParams:
    """He-normal weights (variance 2/fan_in), zero biases."""
    _require_trainable(spec)
    blocks = []
    for i, layer in enumerate(spec.layers):
        fan_in, fan_out = layer.shape
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        blocks.append(ParamBlock(i, (fan_in, fan_out), w))
        blocks.append(ParamBlock(i, (fan_out,), np.zeros(fan_out)))
    return LayeredParams(tuple(blocks), spec.block_split)


def _weights(spec: ModelSpec, params: LayeredParams) -> list[tuple[np.ndarray, np.ndarray]]:
    _require_trainable(spec)
    expected = [shape for layer in spec.layers for _, shape in layer.param_shapes()]
    if [b.shape for b in params.blocks] != expected:
        raise StructureError("parameter blocks do not match the model spec")
    arrays = params.arrays()
    return list(zip(arrays[0::2], arrays[1::2]))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(spec: ModelSpec, weights, x: np.ndarray):
    if x.shape[1] != spec.input_dim:
        raise StructureError(f"batch has {x.shape[1]} features, model expects {spec.input_dim}")
    acts = [x]
    pre = []
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(weights):
        z = h @ w + b
        pre.append(z)
        if i == last:
            break
        act = spec.layers[i].activation
        h = np.maximum(z, 0.0) if act == "relu" else z
        acts.append(h)
    return acts, pre


def forward(spec: ModelSpec, params: LayeredParams, batch: Batch) -> np.ndarray:
    """Class-probability matrix, one softmax row per sample."""
    acts, pre = _forward(spec, _weights(spec, params), batch.features)
    return _softmax(pre[-1])


def _loss_and_grad(spec: ModelSpec, weights, x: np.ndarray, y: np.ndarray):
    acts, pre = _forward(spec, weights, x)
    logits = pre[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    n = x.shape[0]
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, y]))

    delta = np.exp(shifted - log_z[:, None])
    delta[rows, y] -= 1.0
    delta /= n
    grads = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        w, _ = weights[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i:
            delta = delta @ w.T
            if spec.layers[i - 1].activation == "relu":
                delta = delta * (pre[i - 1] > 0)
    return loss, grads


def _check_labels(spec: ModelSpec, batch: Batch) -> None:
    if len(batch) == 0:
        raise ValueError("batch is empty")
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise StructureError(f"labels must lie in [0, {spec.num_classes})")


def loss_and_grad(spec: ModelSpec, params: LayeredParams,
                  batch: Batch) -> tuple[float, LayeredParams]:
    """Mean cross-entropy and its gradient, laid out like ``params``."""
    _check_labels(spec, batch)
    loss, grads = _loss_and_grad(spec, _weights(spec, params), batch.features, batch.labels)
    flat = [g for pair in grads for g in pair]
    blocks = tuple(
        ParamBlock(b.layer_id, b.shape, g) for b, g in zip(params.blocks, flat)
    )
    return loss, LayeredParams(blocks, params.split_index)


def loss(spec: ModelSpec, params: LayeredParams, batch: Batch) -> float:
    _check_labels(spec, batch)
    probs = forward(spec, params, batch)
    picked = probs[np.arange(len(batch)), batch.labels]
    # log-sum-exp path is exact where the probability would underflow
    if np.any(picked < 1e-300):
        return loss_and_grad(spec, params, batch)[0]
    return float(-np.mean(np.log(picked)))


def accuracy(spec: ModelSpec, params: LayeredParams, batch: Batch) -> float:
    if len(batch) == 0:
        raise ValueError("batch is empty")
    probs = forward(spec, params, batch)
    return float(np.mean(np.argmax(probs, axis=1) == batch.labels))


def client_sgd(spec: ModelSpec, params: LayeredParams, data: Batch, B: int, E: int,
               eta: float, rng: np.random.Generator) -> LayeredParams:
    """E epochs of shuffled mini-batch SGD over every layer.

    The final short batch of an epoch is kept. ``params`` is not modified.
    """
    if len(data) == 0:
        raise ValueError("client dataset is empty")
    if B < 1 or E < 1:
        raise ValueError(f"B and E must be >= 1, got B={B}, E={E}")
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    _check_labels(spec, data)
    weights = [(w.copy(), b.copy()) for w, b in _weights(spec, params)]
    x, y = data.features, data.labels
    n = len(data)
    for _ in range(E):
        order = rng.permutation(n)
        for start in range(0, n, B):
            idx = order[start:start + B]
            _, grads = _loss_and_grad(spec, weights, x[idx], y[idx])
            for (w, b), (gw, gb) in zip(weights, grads):
                w -= eta * gw
                b -= eta * gb
    flat = [a for pair in weights for a in pair]
    blocks = tuple(ParamBlock(b.layer_id, b.shape, a) for b, a in zip(params.blocks, flat))
    return LayeredParams(blocks, params.split_index)
