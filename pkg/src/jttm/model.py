"""Feed-forward softmax classifier with hand-written backpropagation.

Hidden layers are affine + tanh, the output layer is affine only. Weights are
stored as (fan_in, fan_out) matrices so a batch ``X`` of shape (n, d) maps to
``X @ W + b``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class MlpParams:
    layers: List[Tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[0] != self.layers[i - 1][0].shape[1]:
                raise ShapeError(f"layer {i}: fan-in {w.shape[0]} != previous width {self.layers[i - 1][0].shape[1]}")

    @property
    def dims(self) -> List[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[1]

    def arrays(self) -> List[np.ndarray]:
        """Flat view [W0, b0, W1, b1, ...] sharing memory with the layers."""
        return [a for layer in self.layers for a in layer]

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers])

    def equals(self, other: "MlpParams") -> bool:
        return len(self.layers) == len(other.layers) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class ForwardTrace:
    """Per-example activations; batched calls give 2-d arrays."""

    penultimate: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def init_params(dims: Sequence[int], seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ShapeError(f"layer sizes must be >= 2 positive integers, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-s, s, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return MlpParams(layers)


def zeros_like(params: MlpParams) -> MlpParams:
    return MlpParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activations(params: MlpParams, x: np.ndarray) -> List[np.ndarray]:
    if x.shape[-1] != params.dims[0]:
        raise ShapeError(f"feature dimension {x.shape[-1]} != input width {params.dims[0]}")
    acts = [x]
    h = x
    for w, b in params.layers[:-1]:
        h = np.tanh(h @ w + b)
        acts.append(h)
    return acts


def forward(params: MlpParams, features: np.ndarray) -> ForwardTrace:
    """Forward pass for one vector (d,) or a batch (n, d).

    With no hidden layers the penultimate representation is the input itself.
    """
    x = np.asarray(features, dtype=np.float64)
    acts = _activations(params, x)
    w, b = params.layers[-1]
    logits = acts[-1] @ w + b
    return ForwardTrace(penultimate=acts[-1], logits=logits, probs=softmax(logits))


def penultimate(params: MlpParams, features: np.ndarray) -> np.ndarray:
    return _activations(params, np.asarray(features, dtype=np.float64))[-1]


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(probs[label]))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def per_example_loss(params: MlpParams, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Cross-entropy of every row, computed through log-softmax."""
    trace = forward(params, features)
    labels = np.asarray(labels)
    return -log_softmax(trace.logits)[np.arange(len(labels)), labels]


def weighted_loss_and_grad(
    params: MlpParams, features: np.ndarray, labels: np.ndarray, weights: np.ndarray
) -> Tuple[float, MlpParams]:
    """Weighted-mean cross-entropy ``sum(w_i l_i) / sum(w_i)`` and its exact gradient."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    w_ex = np.asarray(weights, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if (w_ex < 0).any():
        raise ValueError("example weights must be non-negative")
    total = w_ex.sum()
    if total <= 0:
        raise ValueError("total example weight is zero")
    if labels.min() < 0 or labels.max() >= params.num_classes:
        raise IndexError("label out of range")

    acts = _activations(params, x)
    w_out, b_out = params.layers[-1]
    logits = acts[-1] @ w_out + b_out
    logp = log_softmax(logits)
    rows = np.arange(n)
    coef = w_ex / total
    loss = float(-(coef * logp[rows, labels]).sum())

    # d loss / d logits = coef * (softmax - onehot)
    delta = np.exp(logp)
    delta[rows, labels] -= 1.0
    delta *= coef[:, None]

    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i:
            delta = (delta @ w.T) * (1.0 - acts[i] ** 2)
    return loss, MlpParams(grads)


def gradient(params: MlpParams, batch: Sequence[Tuple[np.ndarray, int, float]]) -> Tuple[MlpParams, float]:
    """Gradient and loss for a list of (features, label, weight) triples."""
    if not batch:
        raise ValueError("empty batch")
    x = np.stack([np.asarray(f, dtype=np.float64) for f, _, _ in batch])
    y = np.array([lab for _, lab, _ in batch], dtype=np.int64)
    w = np.array([wt for _, _, wt in batch], dtype=np.float64)
    loss, grads = weighted_loss_and_grad(params, x, y, w)
    return grads, loss


def predict(params: MlpParams, features: np.ndarray) -> np.ndarray:
    """Argmax class; np.argmax already breaks ties toward the lowest index."""
    return np.argmax(forward(params, features).logits, axis=-1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def params_to_records(params: MlpParams) -> List[dict]:
    recs = [{"dims": params.dims}]
    for i, (w, b) in enumerate(params.layers):
        recs.append({"layer": i, "weight": w.ravel().tolist(), "bias": b.tolist()})
    return recs


def params_from_records(recs: Sequence[dict]) -> MlpParams:
    if not recs or "dims" not in recs[0]:
        raise ShapeError("checkpoint must start with a dims record")
    dims = recs[0]["dims"]
    layer_recs = recs[1:]
    if len(layer_recs) != len(dims) - 1:
        raise ShapeError(f"checkpoint declares {len(dims) - 1} layers but holds {len(layer_recs)}")
    layers = []
    for i, rec in enumerate(layer_recs):
        w = np.array(rec["weight"], dtype=np.float64)
        b = np.array(rec["bias"], dtype=np.float64)
        if w.size != dims[i] * dims[i + 1] or b.size != dims[i + 1]:
            raise ShapeError(f"layer {i}: value count does not match dims {dims[i]}x{dims[i + 1]}")
        layers.append((w.reshape(dims[i], dims[i + 1]), b))
    return MlpParams(layers)


def save_params(params: MlpParams, path, extra: Optional[dict] = None) -> None:
    recs = params_to_records(params)
    if extra:
        recs[0] = {**recs[0], **extra}
    with Path(path).open("w", encoding="utf-8") as handle:
        for rec in recs:
            handle.write(json.dumps(rec) + "\n")


def load_params(path) -> MlpParams:
    with Path(path).open("r", encoding="utf-8") as handle:
        recs = [json.loads(line) for line in handle if line.strip()]
    return params_from_records(recs)
