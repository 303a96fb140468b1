"""Dense ReLU/softmax networks over flat parameter vectors.

Everything here is a pure function of numpy arrays. Parameters live in a single
flat ``float64`` vector (:class:`ParamVector`) so that the federated code can add,
subtract and average models without caring about layer structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

PROB_CLIP = 1e-12

Layout = Tuple[Tuple[str, Tuple[int, ...]], ...]


class LayoutError(ValueError):
    """Raised when parameter layouts or dimensions do not line up."""


def _layout_size(layout: Layout) -> int:
    return sum(math.prod(shape) for _, shape in layout)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat model parameters plus the layer layout that gives them meaning."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise LayoutError(f"values must be 1-D, got shape {values.shape}")
        layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in self.layout)
        if values.size != _layout_size(layout):
            raise LayoutError(
                f"{values.size} values do not fit layout of size {_layout_size(layout)}"
            )
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    def _check(self, other: "ParamVector") -> None:
        if not isinstance(other, ParamVector):
            raise TypeError(f"expected ParamVector, got {type(other).__name__}")
        if other.layout != self.layout:
            raise LayoutError("parameter layouts differ")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.values, self.layout)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None

    def __len__(self) -> int:
        return self.values.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def tensors(self) -> dict:
        """Read-only views of each named tensor, keyed by layer name."""
        out, offset = {}, 0
        for name, shape in self.layout:
            size = math.prod(shape)
            out[name] = self.values[offset:offset + size].reshape(shape)
            offset += size
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, layout: Layout) -> "ParamVector":
        flat = [np.asarray(tensors[name], dtype=np.float64).reshape(-1) for name, _ in layout]
        return cls(np.concatenate(flat) if flat else np.zeros(0), layout)


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths from input to output; ReLU on hidden layers, softmax on top."""

    sizes: Tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    @property
    def n_hidden_layers(self) -> int:
        return len(self.sizes) - 2

    @property
    def layout(self) -> Layout:
        layout = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            layout.append((f"W{i}", (fan_in, fan_out)))
            layout.append((f"b{i}", (fan_out,)))
        return tuple(layout)

    def zeros(self) -> ParamVector:
        return ParamVector(np.zeros(_layout_size(self.layout)), self.layout)

    def init_params(self, seed: Union[int, np.random.Generator, None] = None) -> ParamVector:
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            tensors[f"b{i}"] = np.zeros(fan_out)
        return ParamVector.from_tensors(tensors, self.layout)


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2:
            raise ValueError(f"features must be a matrix, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError(f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} rows")
        if x.shape[0] == 0:
            raise ValueError("empty batch")
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("labels must be integer class indices")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self) -> int:
        return self.labels.shape[0]


def _check_params(spec: NetworkSpec, params: ParamVector) -> None:
    if params.layout != spec.layout:
        raise LayoutError(f"parameter layout does not match network {spec.sizes}")


def _check_batch(spec: NetworkSpec, batch: Batch) -> None:
    if batch.features.shape[1] != spec.n_inputs:
        raise LayoutError(
            f"batch has {batch.features.shape[1]} features, network expects {spec.n_inputs}"
        )


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cache(spec: NetworkSpec, params: ParamVector, x: np.ndarray):
    t = params.tensors()
    activations = [x]
    h = x
    n_layers = len(spec.sizes) - 1
    for i in range(n_layers):
        z = h @ t[f"W{i}"] + t[f"b{i}"]
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
            activations.append(h)
        else:
            return activations, _softmax(z)


def forward(spec: NetworkSpec, params: ParamVector, batch: Batch) -> np.ndarray:
    """Class probabilities, one row per example."""
    _check_params(spec, params)
    _check_batch(spec, batch)
    return _forward_cache(spec, params, batch.features)[1]


def hidden_activations(spec: NetworkSpec, params: ParamVector, features: np.ndarray,
                       layer: int) -> np.ndarray:
    """Post-ReLU activations of hidden layer ``layer`` (0-based)."""
    _check_params(spec, params)
    if not 0 <= layer < spec.n_hidden_layers:
        raise ValueError(f"hidden layer {layer} out of range [0, {spec.n_hidden_layers})")
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_inputs:
        raise LayoutError(f"features of shape {x.shape} do not match network input")
    return _forward_cache(spec, params, x)[0][layer + 1]


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    bad = np.flatnonzero((labels < 0) | (labels >= n_classes))
    if bad.size:
        raise ValueError(f"label {labels[bad[0]]} at row {bad[0]} outside [0, {n_classes})")
    return labels


def cross_entropy(pred: np.ndarray, labels: np.ndarray) -> float:
    """Batch-mean negative log-likelihood of the true class."""
    pred = np.asarray(pred, dtype=np.float64)
    labels = _check_labels(labels, pred.shape[1])
    if labels.shape[0] != pred.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {pred.shape[0]} prediction rows")
    picked = np.clip(pred[np.arange(pred.shape[0]), labels], PROB_CLIP, 1.0)
    return float(np.mean(-np.log(picked)))


def kl_divergence(reference: np.ndarray, current: np.ndarray) -> float:
    """Batch-mean KL(reference || current), reference first."""
    ref = np.asarray(reference, dtype=np.float64)
    cur = np.asarray(current, dtype=np.float64)
    if ref.shape != cur.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {cur.shape}")
    log_ratio = np.log(np.clip(ref, PROB_CLIP, 1.0)) - np.log(np.clip(cur, PROB_CLIP, 1.0))
    return float(np.mean(np.sum(ref * log_ratio, axis=1)))


def smoothed_target(labels: np.ndarray, reference: np.ndarray, alpha: float) -> np.ndarray:
    """Mix of one-hot labels and reference predictions, weights 1/(1+a) and a/(1+a)."""
    reference = np.asarray(reference, dtype=np.float64)
    onehot = np.zeros_like(reference)
    onehot[np.arange(reference.shape[0]), labels] = 1.0
    return (onehot + alpha * reference) / (1.0 + alpha)


def soft_cross_entropy(target: np.ndarray, pred: np.ndarray) -> float:
    """Batch-mean cross entropy against a soft target distribution."""
    logp = np.log(np.clip(np.asarray(pred, dtype=np.float64), PROB_CLIP, 1.0))
    return float(np.mean(-np.sum(target * logp, axis=1)))


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not alpha >= 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return alpha


def constrained_loss(spec: NetworkSpec, params: ParamVector, batch: Batch,
                     history_pred: Optional[np.ndarray], alpha: float) -> float:
    """Cross entropy plus ``alpha`` times KL(history prediction || current prediction)."""
    alpha = _check_alpha(alpha)
    pred = forward(spec, params, batch)
    ce = cross_entropy(pred, batch.labels)
    if history_pred is None or alpha == 0.0:
        return ce
    return ce + alpha * kl_divergence(history_pred, pred)


def grad(spec: NetworkSpec, params: ParamVector, batch: Batch,
         history_pred: Optional[np.ndarray] = None, alpha: float = 0.0) -> ParamVector:
    """Analytic gradient of :func:`constrained_loss`.

    ``history_pred`` is treated as a constant. Without it the gradient is that of
    plain cross entropy.
    """
    _check_params(spec, params)
    _check_batch(spec, batch)
    alpha = _check_alpha(alpha)
    labels = _check_labels(batch.labels, spec.n_classes)
    activations, probs = _forward_cache(spec, params, batch.features)
    n = len(batch)

    # d(loss)/d(logits) = (1 + a) p - (y + a r)
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    if history_pred is not None and alpha != 0.0:
        ref = np.asarray(history_pred, dtype=np.float64)
        if ref.shape != probs.shape:
            raise ValueError(f"history prediction shape {ref.shape} != {probs.shape}")
        delta += alpha * (probs - ref)
    delta /= n

    t = params.tensors()
    grads = {}
    for i in range(len(spec.sizes) - 2, -1, -1):
        h = activations[i]
        grads[f"W{i}"] = h.T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ t[f"W{i}"].T) * (h > 0)
    return ParamVector.from_tensors(grads, params.layout)


def sgd_step(params: ParamVector, gradient: ParamVector, lr: float) -> ParamVector:
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    return params - lr * gradient


def accuracy(spec: NetworkSpec, params: ParamVector, batch: Batch) -> float:
    pred = forward(spec, params, batch)
    return float(np.mean(np.argmax(pred, axis=1) == batch.labels))


# -- checkpoint files ---------------------------------------------------------

def _format_layout(layout: Layout) -> str:
    return "layout " + " ".join(f"{name}:{'x'.join(map(str, shape))}" for name, shape in layout)


def _parse_layout(line: str) -> Layout:
    head, *records = line.split()
    if head != "layout":
        raise ValueError("checkpoint header must start with 'layout'")
    layout = []
    for rec in records:
        name, _, dims = rec.partition(":")
        if not name or not dims:
            raise ValueError(f"malformed layout record {rec!r}")
        layout.append((name, tuple(int(d) for d in dims.split("x"))))
    return tuple(layout)


def save_params(params: ParamVector, path: Union[str, Path]) -> None:
    """Write a text checkpoint; ``repr`` of each float round-trips exactly."""
    lines = [_format_layout(params.layout)]
    lines.extend(repr(float(v)) for v in params.values)
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path: Union[str, Path]) -> ParamVector:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty checkpoint")
    layout = _parse_layout(lines[0])
    values = np.array([float(v) for v in lines[1:] if v.strip()], dtype=np.float64)
    return ParamVector(values, layout)
