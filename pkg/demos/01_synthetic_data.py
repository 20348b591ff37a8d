"""Synthetic data: what the classes look like and how participants split them.

Each sequence is a set of coupled oscillators.  The class decides which
channels drive which, so the label lives in the inter-channel structure,
not in any single channel's marginal distribution.
"""
import numpy as np

from fedrel import correlations as cr
from fedrel import synthdata as sd

ds = sd.generate(sd.GeneratorConfig(), seed=0)
print(f"{len(ds)} sequences, T={ds.T}, N={ds.N} channels x D={ds.D} features, {ds.num_classes} classes")
print("class counts:", ds.class_histogram())

# Channel-level Pearson graphs, averaged per class.  The coupling pattern
# shows up as different off-diagonal structure.
for c in range(ds.num_classes):
    mats = [cr.pcc_adjacency(s.values.mean(axis=-1).T).matrix for s in ds.sequences if s.label == c]
    m = np.mean(mats, axis=0)
    off = m[~np.eye(ds.N, dtype=bool)]
    print(f"class {c}: mean |pcc| off-diagonal {off.mean():.3f}, strongest pair {tuple(int(i) for i in np.unravel_index(np.argmax(m - np.eye(ds.N)), m.shape))}")

# Dirichlet label skew.  Small alpha concentrates each class on a few shards.
train, test = sd.train_test_split(ds, 0.8, seed=0)
for alpha in (100.0, 0.5, 0.1):
    shards = sd.partition_noniid(train, sd.PartitionSpec(K=5, alpha=alpha, seed=0))
    print(f"\nalpha={alpha}")
    for k, shard in enumerate(shards):
        print(f"  participant {k}: {len(shard):4d} sequences, classes {shard.class_histogram()}")

# A window of w+1 consecutive graphs is the model's unit of input.
win = sd.window_array(ds.values()[:1], w=2)[0]
print(f"\nsequence 0 cut into {win.shape[0]} windows of shape {win.shape[1:]}")
