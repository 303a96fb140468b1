"""
Round-to-round drift of local representations
=============================================

With embedding dumps on, every sampled client appends the mean hidden-layer
activation of its adapted model each round. Here we measure how far a client's
representation moves between consecutive participations, with and without the
elastic constraint. Projection (e.g. t-SNE) is left to external tools.
"""
# %%
import csv
import tempfile
from collections import defaultdict
from pathlib import Path

import numpy as np

from fedec.datagen import PartitionSpec, shard_partition, synth_mixture
from fedec.nncore import NetworkSpec
from fedec.orchestrator import RoundConfig, run_experiment
from fedec.strategies import StrategyKind

spec = NetworkSpec((16, 32, 5))
ds = synth_mixture(5, 16, 400, 1.5, seed=1)
shards = shard_partition(ds, PartitionSpec(20, 2, seed=1))
workdir = Path(tempfile.mkdtemp())


def drift(path):
    per_client = defaultdict(list)
    with open(path) as fh:
        for row in csv.reader(fh):
            per_client[int(row[1])].append(np.array(row[2:], dtype=float))
    steps = [np.linalg.norm(b - a) for seq in per_client.values() for a, b in zip(seq, seq[1:])]
    return float(np.mean(steps))


# %%
for name, alpha in [("fedec_wo", 0.0), ("fedec", 2.0)]:
    path = workdir / f"{name}.csv"
    cfg = RoundConfig(20, 0.25, 60, 2, 0.02, 1.0, StrategyKind(name, alpha), 20, seed=1)
    run_experiment(cfg, spec, shards, embeddings=path, embedding_layer=0)
    print(f"{name:<9} mean embedding step between participations: {drift(path):.4f}")
