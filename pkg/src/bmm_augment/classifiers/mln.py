"""Fully connected ReLU network with a softmax output, trained by momentum SGD.

Default layout is 784-128-164-10.  The training loss is the squared error
between the softmax output and the one-hot target; cross-entropy is
available through ``TrainConfig.loss``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import BadModelFile, EmptyDataset, LabelOutOfRange, ShapeMismatch

log = logging.getLogger(__name__)

DEFAULT_LAYOUT = (784, 128, 164, 10)


@dataclass(eq=False)
class MlnModel:
    layout: tuple
    weights: list  # weights[l] has shape (layout[l+1], layout[l])
    biases: list

    def __post_init__(self):
        self.layout = tuple(int(n) for n in self.layout)
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layout[l + 1], self.layout[l]) or b.shape != (self.layout[l + 1],):
                raise ShapeMismatch(f"layer {l} has W {W.shape}, b {b.shape}")

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def copy(self) -> "MlnModel":
        return MlnModel(self.layout, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def equals(self, other: "MlnModel") -> bool:
        return self.layout == other.layout and all(
            np.array_equal(a, b) for a, b in zip(self.params(), other.params())
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.07
    momentum: float = 0.9
    epochs: int = 40
    batch_size: int = 100
    seed: int = 0
    loss: str = "squared"  # or "cross_entropy"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.loss not in ("squared", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    validation_error: list = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    val_predictions: list = field(default_factory=list)  # filled when requested


def mln_init(layout=DEFAULT_LAYOUT, seed=0) -> MlnModel:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layout[:-1], layout[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlnModel(tuple(layout), weights, biases)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(model: MlnModel, X: np.ndarray):
    """Return (pre-activations, activations), activations[0] being the input."""
    acts, pre = [X], []
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ W.T + b
        pre.append(z)
        acts.append(softmax(z) if l == last else np.maximum(z, 0.0))
    return pre, acts


def _check_input(model: MlnModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.layout[0]:
        raise ShapeMismatch(f"input length {X.shape[-1]} != {model.layout[0]}")
    return X


def mln_forward(model: MlnModel, x) -> np.ndarray:
    """Class probabilities for one input vector or a batch of row vectors."""
    x = _check_input(model, x)
    single = x.ndim == 1
    out = _forward(model, np.atleast_2d(x))[1][-1]
    return out[0] if single else out


def mln_predict(model: MlnModel, X, chunk: int = 4096) -> np.ndarray:
    X = _check_input(model, X)
    return np.concatenate(
        [np.argmax(_forward(model, X[s:s + chunk])[1][-1], axis=1) for s in range(0, len(X), chunk)]
    ) if len(X) else np.zeros(0, dtype=np.intp)


def _one_hot(labels, n_out: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels.size and (labels.min() < 0 or labels.max() >= n_out):
        raise LabelOutOfRange(f"labels must lie in [0, {n_out})")
    t = np.zeros((labels.size, n_out))
    t[np.arange(labels.size), labels] = 1.0
    return t


def mln_loss(output, target_label, loss: str = "squared") -> float:
    output = np.asarray(output, dtype=np.float64)
    t = _one_hot([target_label], output.shape[-1])[0]
    if loss == "cross_entropy":
        return float(-np.log(output[int(target_label)]))
    return float(np.sum((output - t) ** 2))


def _backward(model: MlnModel, X: np.ndarray, T: np.ndarray, loss: str):
    """Gradients of the batch-mean loss; returns (grads_W, grads_b, per-sample losses)."""
    pre, acts = _forward(model, X)
    a = acts[-1]
    n = X.shape[0]
    if loss == "cross_entropy":
        losses = -np.log(np.sum(a * T, axis=1))
        delta = a - T
    else:
        g = 2.0 * (a - T)
        losses = np.sum((a - T) ** 2, axis=1)
        # softmax Jacobian-vector product: a * (g - <g, a>)
        delta = a * (g - np.sum(g * a, axis=1, keepdims=True))
    delta /= n
    grads_W = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    for l in range(len(model.weights) - 1, -1, -1):
        grads_W[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l:
            # ReLU subgradient at 0 taken as 0
            delta = (delta @ model.weights[l]) * (pre[l - 1] > 0)
    return grads_W, grads_b, losses


def mln_backward(model: MlnModel, x, target_label, loss: str = "squared"):
    """Exact gradients of the per-example loss, shaped like (weights, biases)."""
    x = _check_input(model, x)
    if x.ndim != 1:
        raise ShapeMismatch("mln_backward takes a single input vector")
    T = _one_hot([target_label], model.layout[-1])
    grads_W, grads_b, _ = _backward(model, x[None, :], T, loss)
    return grads_W, grads_b


def shuffle_rng(seed) -> np.random.Generator:
    # separate from the initializer stream, which also derives from ``seed``
    return np.random.default_rng([int(seed), 1])


@dataclass
class TrainResult:
    best: MlnModel
    final: MlnModel
    history: TrainHistory


def error_rate(model: MlnModel, X, y) -> tuple[float, np.ndarray]:
    pred = mln_predict(model, X)
    return float(np.mean(pred != np.asarray(y))), pred


def mln_train(model: MlnModel, train, validation=None, config: TrainConfig | None = None,
              record_predictions: bool = False) -> TrainResult:
    """Minibatch gradient descent with momentum.

    ``train`` and ``validation`` are ``(features, labels)`` pairs. The input
    model is not modified. Best epoch is the earliest with the lowest
    validation error; without a validation set the last epoch is used.
    """
    config = config or TrainConfig()
    X, y = train
    X = _check_input(model, X)
    y = np.asarray(getattr(y, "values", y), dtype=np.intp)
    if X.shape[0] == 0:
        raise EmptyDataset("no training examples")
    T = _one_hot(y, model.layout[-1])
    if validation is not None:
        val_x = _check_input(model, validation[0])
        val_y = np.asarray(getattr(validation[1], "values", validation[1]), dtype=np.intp)
        if val_x.shape[0] == 0:
            validation = None

    model = model.copy()
    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    rng = shuffle_rng(config.seed)
    history = TrainHistory()
    best, best_err = model.copy(), np.inf
    lr, mu = config.learning_rate, config.momentum
    n = X.shape[0]

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            grads_W, grads_b, losses = _backward(model, X[batch], T[batch], config.loss)
            total += losses.sum()
            for p, v, g in zip(params, velocity, [*grads_W, *grads_b]):
                v *= mu
                v -= lr * g
                p += v
        history.train_loss.append(total / n)
        if validation is not None:
            err, pred = error_rate(model, val_x, val_y)
            history.validation_error.append(err)
            if record_predictions:
                history.val_predictions.append(pred)
            if err < best_err:
                best_err, best = err, model.copy()
                history.best_epoch = epoch
            log.debug("epoch %d loss %.5f val_error %.4f", epoch, total / n, err)
        else:
            history.best_epoch = epoch
            best = model
    return TrainResult(best if validation is not None else model.copy(), model, history)


# -- serialization ---------------------------------------------------------
#
# Little-endian flat layout:
#   4s  magic "MLNW"
#   u32 version, u32 number of layer sizes L
#   u32[L] layer sizes
#   per layer: f64 W (row-major), f64 b

MODEL_MAGIC = b"MLNW"
MODEL_VERSION = 1


def serialize_mln(model: MlnModel) -> bytes:
    parts = [struct.pack("<4sII", MODEL_MAGIC, MODEL_VERSION, len(model.layout)),
             struct.pack(f"<{len(model.layout)}I", *model.layout)]
    for W, b in zip(model.weights, model.biases):
        parts.append(W.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
    return b"".join(parts)


def parse_mln(data: bytes) -> MlnModel:
    if len(data) < 12:
        raise BadModelFile("file shorter than header")
    magic, version, L = struct.unpack_from("<4sII", data)
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise BadModelFile(f"bad header {magic!r} v{version}")
    layout = struct.unpack_from(f"<{L}I", data, 12)
    offset = 12 + 4 * L
    expected = offset + 8 * sum(o * i + o for i, o in zip(layout[:-1], layout[1:]))
    if len(data) != expected:
        raise BadModelFile(f"expected {expected} bytes, got {len(data)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layout[:-1], layout[1:]):
        W = np.frombuffer(data, "<f8", fan_in * fan_out, offset).reshape(fan_out, fan_in)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(data, "<f8", fan_out, offset)
        offset += 8 * fan_out
        weights.append(W.astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlnModel(layout, weights, biases)


def save_mln(path, model: MlnModel) -> None:
    Path(path).write_bytes(serialize_mln(model))


def load_mln(path) -> MlnModel:
    return parse_mln(Path(path).read_bytes())
