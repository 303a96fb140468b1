"""
Class-shard non-IID partitioning
================================

Every class is cut into ``clients * k / n_classes`` equal shards and each client
draws ``k`` of them. A client may draw the same class twice.
"""
# %%
from collections import Counter

from fedec.datagen import PartitionSpec, shard_partition, synth_mixture

ds = synth_mixture(classes=10, dim=8, per_class=500, separation=3.0, seed=0)
shards, summary = shard_partition(ds, PartitionSpec(clients=100, classes_per_client=2, seed=0),
                                  return_summary=True)

print("shards per class:", summary.shards_per_class)
print("examples per shard:", summary.shard_sizes[0])
print("allocations per class:", dict(sorted(Counter(
    c for cl in summary.client_classes for c in cl).items())))

# %%
# A handful of clients: their class draws and train/test sizes.

for s, drawn in list(zip(shards, summary.client_classes))[:6]:
    print(f"client {s.client_id:>2}: classes {drawn}  train={len(s.train)} test={len(s.test)}")

repeats = sum(len(set(cl)) < len(cl) for cl in summary.client_classes)
print(f"{repeats} of {len(shards)} clients drew the same class twice")
