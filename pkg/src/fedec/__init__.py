"""Elastically-constrained meta-learning for personalized federated learning.

A single-process simulator: dense numpy networks, class-shard non-IID client
data, Reptile-style aggregation with a per-client historical-model KL
constraint, plus FedEC-wo, FedEC-l2, FedAvg and first-order Per-FedAvg.
"""

from .datagen import ClientShard, LabeledDataset, PartitionSpec, load_csv, shard_partition, \
    synth_mixture, write_csv
from .nncore import Batch, NetworkSpec, ParamVector, constrained_loss, cross_entropy, forward, \
    grad, kl_divergence, load_params, save_params, sgd_step
from .orchestrator import ExperimentResult, MetricsRecord, RoundConfig, run_experiment, \
    run_round, sample_clients
from .strategies import HistoryStore, InnerResult, StrategyKind, inner_update, \
    outer_update_fedavg, outer_update_reptile, update_history

__version__ = "0.1.0"
