"""Dense feed-forward networks: specs, initialization, forward/backward, losses.

Model parameters live in one flat float64 vector with a fixed layout: for
each layer, the weight matrix (input_size x output_size, row-major) followed
by the bias vector.  Gradients come back in the same layout and are the SUM
over the batch of per-example gradients, matching the mini-batch update
params - eta * sum_j grad_j.  The loss() value reported for tracking is the
batch MEAN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, matmul

ACTIVATIONS = ("identity", "sigmoid", "relu", "softmax")
LOSSES = ("squared", "cross_entropy")

CLAMP = 1e-12  # probability floor/ceiling inside cross-entropy


@dataclass(frozen=True)
class LayerSpec:
    input_size: int
    output_size: int
    activation: str = "identity"
    dropout_after: float = 0.0

    def __post_init__(self):
        if self.input_size < 1 or self.output_size < 1:
            raise ValueError("layer sizes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_after < 1.0:
            raise ValueError("dropout_after must be in [0, 1)")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    loss: str = "squared"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.output_size != cur.input_size:
                raise ValueError(
                    f"layer dimension mismatch: {prev.output_size} -> {cur.input_size}"
                )
        for layer in self.layers[:-1]:
            if layer.activation == "softmax":
                raise ValueError("softmax is only permitted on the final layer")
        if self.layers[-1].dropout_after > 0:
            raise ValueError("dropout after the output layer is not supported")

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    @property
    def output_size(self) -> int:
        return self.layers[-1].output_size

    @property
    def has_dropout(self) -> bool:
        return any(l.dropout_after > 0 for l in self.layers)


def dense(sizes, activations, loss="squared", dropout=None) -> NetworkSpec:
    """Build a NetworkSpec from layer sizes [d0, d1, ..., dk]."""
    dropout = dropout or [0.0] * (len(sizes) - 1)
    layers = [
        LayerSpec(sizes[i], sizes[i + 1], activations[i], dropout[i])
        for i in range(len(sizes) - 1)
    ]
    return NetworkSpec(tuple(layers), loss)


@dataclass(frozen=True)
class Batch:
    x: np.ndarray  # (rows, features)
    y: np.ndarray  # (rows, targets)

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ShapeError(
                f"batch row counts disagree: {self.x.shape[0]} vs {self.y.shape[0]}"
            )

    @property
    def rows(self) -> int:
        return self.x.shape[0]


# --- parameter vector layout -----------------------------------------------

def param_count(spec: NetworkSpec) -> int:
    return sum(l.input_size * l.output_size + l.output_size for l in spec.layers)


def unpack(spec: NetworkSpec, params: np.ndarray):
    """Views (W, b) per layer into the flat parameter vector."""
    if params.shape != (param_count(spec),):
        raise ShapeError(
            f"expected {param_count(spec)} parameters, got shape {params.shape}"
        )
    out = []
    offset = 0
    for layer in spec.layers:
        n_w = layer.input_size * layer.output_size
        w = params[offset:offset + n_w].reshape(layer.input_size, layer.output_size)
        offset += n_w
        b = params[offset:offset + layer.output_size]
        offset += layer.output_size
        out.append((w, b))
    return out


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights (+/- sqrt(6/(fan_in+fan_out))), zero biases."""
    params = np.zeros(param_count(spec))
    offset = 0
    for layer in spec.layers:
        n_w = layer.input_size * layer.output_size
        limit = np.sqrt(6.0 / (layer.input_size + layer.output_size))
        params[offset:offset + n_w] = rng.uniform(-limit, limit, n_w)
        offset += n_w + layer.output_size  # biases stay zero
    return params


# --- activations ------------------------------------------------------------

def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _activate(name, z):
    if name == "identity":
        return z
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return _softmax(z)


def _activation_backward(name, delta_act, z, act):
    """Map d(loss)/d(activation) to d(loss)/d(pre-activation), rowwise."""
    if name == "identity":
        return delta_act
    if name == "sigmoid":
        return delta_act * act * (1.0 - act)
    if name == "relu":
        return delta_act * (z > 0)
    # softmax Jacobian-vector product: s * (d - <d, s>)
    dot = (delta_act * act).sum(axis=1, keepdims=True)
    return act * (delta_act - dot)


# --- forward / loss / backward ----------------------------------------------

@dataclass
class ForwardRecord:
    x: np.ndarray
    pre: list        # z per layer, (rows, out)
    act: list        # activation(z) per layer, before dropout
    out: list        # after dropout (== act when none)
    masks: list      # dropout mask (already scaled) or None

    @property
    def output(self) -> np.ndarray:
        return self.out[-1]


def forward(spec: NetworkSpec, params: np.ndarray, x: np.ndarray,
            mode: str = "eval", rng: np.random.Generator | None = None) -> ForwardRecord:
    """Run the network on x (rows, input_size).

    In train mode, dropout masks are sampled from rng with keep probability
    1 - rate and survivors scaled by 1/(1 - rate), so eval needs no rescaling.
    In eval mode dropout is the identity.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if x.ndim != 2 or x.shape[1] != spec.input_size:
        raise ShapeError(f"input shape {x.shape} does not match {spec.input_size} features")
    if mode == "train" and spec.has_dropout and rng is None:
        raise ValueError("train mode with dropout requires an rng")

    record = ForwardRecord(x=x, pre=[], act=[], out=[], masks=[])
    a = x
    for layer, (w, b) in zip(spec.layers, unpack(spec, params)):
        z = matmul(a, w) + b
        act = _activate(layer.activation, z)
        mask = None
        out = act
        if layer.dropout_after > 0 and mode == "train":
            keep = 1.0 - layer.dropout_after
            mask = (rng.random(act.shape) < keep) / keep
            out = act * mask
        record.pre.append(z)
        record.act.append(act)
        record.out.append(out)
        record.masks.append(mask)
        a = out
    return record


def loss(spec: NetworkSpec, output: np.ndarray, y: np.ndarray) -> float:
    """Mean per-example loss over the batch."""
    if output.shape != y.shape:
        raise ShapeError(f"output shape {output.shape} vs target shape {y.shape}")
    if spec.loss == "squared":
        return float(0.5 * np.sum((output - y) ** 2) / output.shape[0])
    clipped = np.clip(output, CLAMP, 1.0 - CLAMP)
    return float(-np.sum(y * np.log(clipped)) / output.shape[0])


def backward(spec: NetworkSpec, params: np.ndarray, batch: Batch,
             record: ForwardRecord) -> np.ndarray:
    """Gradient of the summed per-example loss, in parameter layout.

    The record must come from forward() on the same batch so dropout masks
    line up.
    """
    layers = unpack(spec, params)
    out = record.output
    last = spec.layers[-1]

    if spec.loss == "cross_entropy" and last.activation == "softmax":
        delta = out - batch.y  # combined softmax/cross-entropy gradient
    elif spec.loss == "squared":
        delta = _activation_backward(last.activation, out - batch.y,
                                     record.pre[-1], record.act[-1])
    else:
        # cross-entropy behind a non-softmax head; clamped outputs have
        # zero gradient where the clamp is active
        inside = (out > CLAMP) & (out < 1.0 - CLAMP)
        d_act = np.where(inside, -batch.y / np.clip(out, CLAMP, 1.0 - CLAMP), 0.0)
        delta = _activation_backward(last.activation, d_act,
                                     record.pre[-1], record.act[-1])

    grad = np.empty_like(params)
    offset = param_count(spec)
    for i in reversed(range(len(spec.layers))):
        layer = spec.layers[i]
        a_prev = record.out[i - 1] if i > 0 else record.x
        grad_b = delta.sum(axis=0)
        grad_w = matmul(a_prev.T, delta)  # (in, out), sums over the batch
        offset -= layer.output_size
        grad[offset:offset + layer.output_size] = grad_b
        n_w = layer.input_size * layer.output_size
        offset -= n_w
        grad[offset:offset + n_w] = grad_w.ravel()
        if i > 0:
            delta = matmul(delta, layers[i][0].T)
            if record.masks[i - 1] is not None:
                delta = delta * record.masks[i - 1]
            delta = _activation_backward(spec.layers[i - 1].activation, delta,
                                         record.pre[i - 1], record.act[i - 1])
    return grad


def predict(spec: NetworkSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    return forward(spec, params, x, mode="eval").output


def accuracy(spec: NetworkSpec, params: np.ndarray, dataset) -> float:
    """Fraction of correct predictions on a dataset.

    pm_one targets: sign agreement with 0 threshold, a tie at exactly 0
    counts as +1.  one_hot targets: argmax agreement, ties broken by the
    lowest index.
    """
    if dataset.features.shape[0] == 0:
        raise ValueError("test set is empty")
    out = predict(spec, params, dataset.features)
    if dataset.encoding == "pm_one":
        pred = np.where(out[:, 0] >= 0.0, 1.0, -1.0)
        return float(np.mean(pred == dataset.targets[:, 0]))
    pred = np.argmax(out, axis=1)
    truth = np.argmax(dataset.targets, axis=1)
    return float(np.mean(pred == truth))
