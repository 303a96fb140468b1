"""The federated round loop: sampling, local adaptation, aggregation, evaluation."""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .datagen import ClientShard
from .nncore import Batch, NetworkSpec, ParamVector, accuracy, cross_entropy, forward, \
    hidden_activations, save_params
from .strategies import HistoryStore, InnerResult, StrategyKind, inner_update, \
    outer_update_fedavg, outer_update_reptile, update_history

# stream tags mixed into the master seed
_INIT, _SAMPLE, _TRAIN, _EVAL = 0, 1, 2, 3


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, keys)])


@dataclass(frozen=True)
class RoundConfig:
    clients: int
    sample_rate: float
    rounds: int
    inner_epochs: int
    inner_lr: float
    outer_lr: float
    strategy: StrategyKind
    batch_size: int = 10
    seed: int = 0
    support_fraction: float = 0.5
    evaluate_all: bool = False

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError("clients must be >= 1")
        if not 0.0 < self.sample_rate <= 1.0:
            raise ValueError("sample_rate must lie in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")
        if not (self.inner_lr > 0 and self.outer_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.support_fraction < 1.0:
            raise ValueError("support_fraction must lie in (0, 1)")

    @property
    def clients_per_round(self) -> int:
        return n_sampled(self.clients, self.sample_rate)


@dataclass
class ExperimentState:
    phi: ParamVector
    history: HistoryStore
    round: int = 0


@dataclass
class MetricsRecord:
    round: int
    mean_acc: float
    mean_loss: float
    client_ids: List[int]
    accuracies: List[float]
    n_constrained: int = 0
    seconds: float = 0.0
    final: bool = False

    @property
    def n_evaluated(self) -> int:
        return len(self.accuracies)


@dataclass
class ExperimentResult:
    records: List[MetricsRecord]
    final: MetricsRecord
    phi: ParamVector
    history: HistoryStore
    personalized: Dict[int, ParamVector] = field(default_factory=dict)

    def final_window_accuracy(self, window: int = 10) -> float:
        """Mean per-round accuracy over the last ``window`` training rounds."""
        tail = self.records[-window:]
        return float(np.mean([r.mean_acc for r in tail]))


def n_sampled(clients: int, rate: float) -> int:
    # tolerance keeps e.g. 0.07 * 100 from rounding up to 8
    return max(1, min(clients, math.ceil(rate * clients - 1e-9)))


def sample_clients(clients: int, rate: float, seed) -> List[int]:
    """Uniform sample without replacement of ``ceil(rate * clients)`` ids, sorted."""
    m = n_sampled(clients, rate)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(clients, size=m, replace=False))


def _last_epoch_loss(result: InnerResult, tau: int) -> float:
    per_epoch = len(result.losses) // tau
    return float(np.mean(result.losses[-per_epoch:]))


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _test_accuracy(spec: NetworkSpec, params: ParamVector, shard: ClientShard) -> float:
    return accuracy(spec, params, Batch(shard.test.features, shard.test.labels))


def dump_embeddings(spec: NetworkSpec, params: ParamVector, shard: ClientShard, layer: int,
                    path: Union[str, Path], round: int = 0) -> np.ndarray:
    """Append the mean hidden activation over the client's train set as one CSV row."""
    mean = hidden_activations(spec, params, shard.train.features, layer).mean(axis=0)
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow([round, shard.client_id] + [repr(float(v)) for v in mean])
    return mean


def run_round(state: ExperimentState, config: RoundConfig, spec: NetworkSpec,
              shards: Sequence[ClientShard], workers: int = 1,
              embeddings: Optional[Path] = None, embedding_layer: int = 0):
    """One communication round. Returns ``(new_state, record, results_by_client)``.

    Every sampled client adapts from the same snapshot of ``phi`` and the history
    store; aggregation and history writes happen afterwards, in client-id order.
    """
    if state.round >= config.rounds:
        raise ValueError(f"round {state.round} already reached the configured {config.rounds}")
    start = time.perf_counter()
    t = state.round + 1
    kind = config.strategy
    ids = sample_clients(config.clients, config.sample_rate, _rng(config.seed, _SAMPLE, t))

    def adapt(cid: int) -> InnerResult:
        return inner_update(kind, spec, state.phi, shards[cid], state.history.get(cid),
                            config.inner_epochs, config.inner_lr, config.batch_size,
                            _rng(config.seed, _TRAIN, t, cid), config.support_fraction)

    results = dict(zip(ids, _map(adapt, ids, workers)))

    if kind.aggregation == "reptile":
        phi = outer_update_reptile(state.phi, [results[i].params for i in ids], config.outer_lr)
    else:
        phi = outer_update_fedavg([(results[i].params, results[i].n_train) for i in ids])

    history = state.history
    for cid in ids:
        history = update_history(history, cid, results[cid])

    loss = float(np.mean([_last_epoch_loss(results[i], config.inner_epochs) for i in ids]))
    if config.evaluate_all:
        eval_ids = list(range(config.clients))
        accs, _ = _evaluate(config, spec, shards, phi, history, eval_ids, _EVAL, t, workers)
    elif kind.personalizes:
        eval_ids = ids
        accs = [results[i].test_accuracy for i in ids]
    else:
        eval_ids = ids
        accs = [_test_accuracy(spec, phi, shards[i]) for i in ids]

    if embeddings is not None:
        for cid in ids:
            dump_embeddings(spec, results[cid].params, shards[cid], embedding_layer, embeddings, t)

    record = MetricsRecord(
        round=t, mean_acc=float(np.mean(accs)), mean_loss=loss, client_ids=eval_ids,
        accuracies=[float(a) for a in accs],
        n_constrained=sum(results[i].constrained for i in ids),
        seconds=time.perf_counter() - start)
    return ExperimentState(phi, history, t), record, results


def _evaluate(config, spec, shards, phi, history, ids, tag, t, workers,
              keep: Optional[Dict[int, ParamVector]] = None):
    """Accuracy and train loss per client: fine-tuned models, or ``phi`` itself for FedAvg."""
    kind = config.strategy
    if not kind.personalizes:
        if keep is not None:
            keep.update({cid: phi for cid in ids})
        accs = [_test_accuracy(spec, phi, shards[cid]) for cid in ids]
        losses = [cross_entropy(forward(spec, phi, Batch(shards[cid].train.features,
                                                         shards[cid].train.labels)),
                                shards[cid].train.labels) for cid in ids]
        return accs, losses

    def tune(cid: int) -> InnerResult:
        return inner_update(kind, spec, phi, shards[cid], history.get(cid), config.inner_epochs,
                            config.inner_lr, config.batch_size, _rng(config.seed, tag, t, cid),
                            config.support_fraction)

    results = _map(tune, ids, workers)
    if keep is not None:
        keep.update({cid: r.params for cid, r in zip(ids, results)})
    return ([r.test_accuracy for r in results],
            [_last_epoch_loss(r, config.inner_epochs) for r in results])


def initial_state(config: RoundConfig, spec: NetworkSpec) -> ExperimentState:
    return ExperimentState(spec.init_params(_rng(config.seed, _INIT)), HistoryStore(), 0)


def run_experiment(config: RoundConfig, spec: NetworkSpec, shards: Sequence[ClientShard],
                   workers: int = 1, checkpoint_dir: Optional[Path] = None,
                   checkpoint_interval: int = 0, embeddings: Optional[Path] = None,
                   embedding_layer: int = 0, on_round=None) -> ExperimentResult:
    """Train for ``config.rounds`` rounds, then personalize and evaluate every client.

    After the last round each client fine-tunes from the final meta-initialization
    (same epochs and learning rate as training, history read but not written).
    FedAvg is evaluated with the global model itself.
    """
    if len(shards) != config.clients:
        raise ValueError(f"{len(shards)} shards for {config.clients} clients")
    state = initial_state(config, spec)
    records = []
    for _ in range(config.rounds):
        state, record, _ = run_round(state, config, spec, shards, workers,
                                     embeddings, embedding_layer)
        records.append(record)
        if on_round is not None:
            on_round(record)
        if checkpoint_dir is not None and checkpoint_interval > 0 \
                and state.round % checkpoint_interval == 0:
            save_params(state.phi, Path(checkpoint_dir) / f"phi_round{state.round:04d}.txt")

    start = time.perf_counter()
    everyone = list(range(config.clients))
    personalized: Dict[int, ParamVector] = {}
    accs, losses = _evaluate(config, spec, shards, state.phi, state.history, everyone, _TRAIN,
                             config.rounds + 1, workers, keep=personalized)
    final = MetricsRecord(round=config.rounds + 1, mean_acc=float(np.mean(accs)),
                          mean_loss=float(np.mean(losses)), client_ids=everyone,
                          accuracies=[float(a) for a in accs],
                          seconds=time.perf_counter() - start, final=True)
    return ExperimentResult(records, final, state.phi, state.history, personalized)


METRICS_COLUMNS = ("round", "mean_acc", "mean_loss", "n_evaluated")


def write_metrics_csv(records: Sequence[MetricsRecord], path: Union[str, Path],
                      timing: bool = False) -> None:
    """One row per round plus a trailing ``final`` row.

    The ``seconds`` column is opt-in so that reruns stay byte-identical.
    """
    columns = METRICS_COLUMNS + (("seconds",) if timing else ())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in records:
            row = ["final" if r.final else r.round, repr(r.mean_acc), repr(r.mean_loss),
                   r.n_evaluated]
            if timing:
                row.append(f"{r.seconds:.6f}")
            writer.writerow(row)

