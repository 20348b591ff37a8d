"""FedRel next to FedAvg on a non-IID split.

Prints the relevance weights the server hands out each round.  With
identical shards they collapse to 1/K and FedRel turns into FedAvg.

The step size and local epochs are raised from the defaults so the demo
gets somewhere in 15 rounds.
"""
import numpy as np

from fedrel import diig
from fedrel import federation as fed
from fedrel import synthdata as sd

ds = sd.generate(sd.GeneratorConfig(), seed=0)
model = diig.ModelConfig(w=2)
data = fed.prepare_data(ds, model, K=3, alpha=0.5, seed=0)
for k, shard in enumerate(data.shards):
    print(f"participant {k}: classes {np.bincount(shard.labels, minlength=model.C)}")


def show(rec):
    if rec.round % 3:
        return
    print(f"  round {rec.round:2d}  F1 {rec.global_macro_f1:.3f}  loss {rec.global_loss:.3f}  "
          f"r = {np.round(rec.relevance, 3)}")


for mode in ("fedrel", "fedavg"):
    print(f"\n{mode}")
    cfg = fed.FedConfig(K=3, rounds=15, mode=mode, seed=0, lr=5e-3, local_epochs=2, vae_epochs=10)
    fed.run(cfg, data, on_round=show)

print("\nidentical shards")
same = fed.prepare_data(ds, model, K=3, partition="identical", seed=0, transform=data.transform)
a = fed.run(fed.FedConfig(K=3, rounds=2, mode="fedrel", same_seed=True, seed=0, vae_epochs=5), same)
b = fed.run(fed.FedConfig(K=3, rounds=2, mode="fedavg", same_seed=True, seed=0), same)
print("fedrel relevance", [np.round(r.relevance, 3).tolist() for r in a])
print("bitwise equal to fedavg:", [r.comparable() for r in a] == [r.comparable() for r in b])
