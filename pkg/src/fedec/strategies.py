"""Client-side inner loops and server-side aggregation rules.

Strategies:

``fedec``
    Cross entropy plus ``alpha * KL(history(x) || theta(x))`` once the client
    has a stored historical model; plain cross entropy before that.
``fedec_l2``
    Same schedule, but the penalty is ``alpha * ||theta - history||^2``.
``fedec_wo``
    The unconstrained meta-learner (plain cross entropy, Reptile aggregation).
``fedavg``
    Plain local training with size-weighted averaging of the local models.
``perfedavg_fo``
    First-order Per-FedAvg: each batch is split into support and query halves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .datagen import ClientShard
from .nncore import Batch, LayoutError, NetworkSpec, ParamVector, accuracy, cross_entropy, \
    forward, grad, kl_divergence, sgd_step

STRATEGIES = ("fedec", "fedec_l2", "fedec_wo", "fedavg", "perfedavg_fo")
CONSTRAINED = ("fedec", "fedec_l2")
META = ("fedec", "fedec_l2", "fedec_wo", "perfedavg_fo")


@dataclass(frozen=True)
class StrategyKind:
    name: str
    alpha: float = 0.0

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; choose from {', '.join(STRATEGIES)}")
        alpha = float(self.alpha)
        if not alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.name not in CONSTRAINED and alpha != 0.0:
            raise ValueError(f"alpha={alpha} given for strategy {self.name!r}, which has no constraint")
        object.__setattr__(self, "alpha", alpha)

    @property
    def constrained(self) -> bool:
        return self.name in CONSTRAINED

    @property
    def aggregation(self) -> str:
        return "reptile" if self.name in META else "fedavg"

    @property
    def personalizes(self) -> bool:
        """Whether clients are evaluated after local adaptation rather than on the global model."""
        return self.name != "fedavg"

    def __str__(self) -> str:
        return f"{self.name}(alpha={self.alpha:g})" if self.constrained else self.name


class HistoryStore(Mapping):
    """Per-client memory of the most recent local adaptation.

    Immutable: :func:`update_history` returns a new store.
    """

    def __init__(self, entries: Optional[Mapping[int, ParamVector]] = None):
        self._entries: Dict[int, ParamVector] = dict(entries or {})

    def __getitem__(self, client_id: int) -> ParamVector:
        return self._entries[client_id]

    def __iter__(self):
        return iter(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"HistoryStore(clients={sorted(self._entries)})"


@dataclass
class InnerResult:
    params: ParamVector
    losses: List[float]
    test_accuracy: float
    # per-batch value of the unweighted constraint term; empty when it was off
    penalties: List[float] = field(default_factory=list)
    n_train: int = 0

    @property
    def constrained(self) -> bool:
        return bool(self.penalties)


def update_history(store: HistoryStore, client_id: int, result: InnerResult) -> HistoryStore:
    entries = dict(store._entries)
    entries[int(client_id)] = result.params
    return HistoryStore(entries)


def iter_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batches_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def _l2_prox_step(theta: ParamVector, g: ParamVector, anchor: ParamVector,
                  lr: float, alpha: float) -> ParamVector:
    # gradient step on CE, exact proximal step on alpha*||theta - anchor||^2
    shrink = 2.0 * alpha * lr
    return ParamVector((theta.values - lr * g.values + shrink * anchor.values) / (1.0 + shrink),
                       theta.layout)


def _perfedavg_step(spec: NetworkSpec, theta: ParamVector, batch: Batch, lr: float,
                    support_fraction: float) -> Tuple[ParamVector, float]:
    n = len(batch)
    if n == 1:
        support = query = batch
    else:
        cut = min(max(int(round(support_fraction * n)), 1), n - 1)
        support = Batch(batch.features[:cut], batch.labels[:cut])
        query = Batch(batch.features[cut:], batch.labels[cut:])
    adapted = sgd_step(theta, grad(spec, theta, support), lr)
    loss = cross_entropy(forward(spec, adapted, query), query.labels)
    return sgd_step(theta, grad(spec, adapted, query), lr), loss


def inner_update(kind: StrategyKind, spec: NetworkSpec, phi: ParamVector, shard: ClientShard,
                 history: Optional[ParamVector], tau: int, lr_in: float, batch_size: int,
                 seed, support_fraction: float = 0.5) -> InnerResult:
    """Run ``tau`` epochs of mini-batch gradient descent starting from ``phi``.

    ``history`` is the client's stored model, or None on first participation.
    The constraint is evaluated per mini-batch against the history model's
    predictions on that same batch. Neither ``phi`` nor ``history`` is modified.
    """
    if phi.layout != spec.layout:
        raise LayoutError(f"phi does not match network {spec.sizes}")
    if history is not None and history.layout != spec.layout:
        raise LayoutError("history model does not match network layout")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    train = shard.train
    if len(train) == 0:
        raise ValueError(f"client {shard.client_id} has an empty training set")

    rng = np.random.default_rng(seed)
    use_constraint = kind.constrained and history is not None and kind.alpha > 0.0
    theta = phi
    losses, penalties = [], []
    for _ in range(tau):
        for idx in iter_batches(len(train), batch_size, rng):
            batch = Batch(train.features[idx], train.labels[idx])
            if kind.name == "perfedavg_fo":
                theta, loss = _perfedavg_step(spec, theta, batch, lr_in, support_fraction)
                losses.append(loss)
                continue
            if not use_constraint:
                pred = forward(spec, theta, batch)
                losses.append(cross_entropy(pred, batch.labels))
                theta = sgd_step(theta, grad(spec, theta, batch), lr_in)
            elif kind.name == "fedec":
                ref = forward(spec, history, batch)
                pred = forward(spec, theta, batch)
                penalty = kl_divergence(ref, pred)
                penalties.append(penalty)
                losses.append(cross_entropy(pred, batch.labels) + kind.alpha * penalty)
                theta = sgd_step(theta, grad(spec, theta, batch, ref, kind.alpha), lr_in)
            else:
                pred = forward(spec, theta, batch)
                penalty = float(np.sum((theta.values - history.values) ** 2))
                penalties.append(penalty)
                losses.append(cross_entropy(pred, batch.labels) + kind.alpha * penalty)
                theta = _l2_prox_step(theta, grad(spec, theta, batch), history, lr_in, kind.alpha)

    test = shard.test
    acc = accuracy(spec, theta, Batch(test.features, test.labels)) if len(test) else float("nan")
    return InnerResult(theta, losses, acc, penalties, len(train))


def _average(stack: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    if not stack:
        raise ValueError("nothing to aggregate")
    layout = stack[0].layout
    for p in stack[1:]:
        if p.layout != layout:
            raise LayoutError("parameter layouts differ")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(stack),) or np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive, one per model")
    w = w / w.sum()
    out = w[0] * stack[0].values
    for wi, p in zip(w[1:], stack[1:]):
        out = out + wi * p.values
    return ParamVector(out, layout)


def outer_update_reptile(phi: ParamVector, adapted: Sequence[ParamVector],
                         lr_out: float) -> ParamVector:
    """``phi + lr_out * mean(theta_i - phi)``, written as ``(1-lr)*phi + lr*mean(theta_i)``."""
    if lr_out < 0:
        raise ValueError("lr_out must be non-negative")
    mean = _average(list(adapted), [1.0] * len(adapted))
    if mean.layout != phi.layout:
        raise LayoutError("adapted models do not match phi")
    # summed in input order: permutations agree to rounding, not bitwise
    return ParamVector((1.0 - lr_out) * phi.values + lr_out * mean.values, phi.layout)


def outer_update_fedavg(adapted: Sequence[Tuple[ParamVector, float]]) -> ParamVector:
    adapted = list(adapted)
    return _average([p for p, _ in adapted], [w for _, w in adapted])
