"""One forward pass through the graph model, stage by stage."""
import numpy as np

from fedrel import diig
from fedrel import synthdata as sd
from fedrel import numerics as nx
from fedrel.numerics import Tape

cfg = diig.ModelConfig(w=2)
params = diig.init_params(cfg, seed=0)
ds = sd.generate(sd.GeneratorConfig(num_sequences=8), seed=1)

# A real run learns the per-channel feature transform first; a random
# projection is enough to look at shapes.
rng = np.random.default_rng(0)
proj = rng.standard_normal((ds.D, cfg.d)) / np.sqrt(ds.D)
x = sd.window_array(ds.values()[:1], cfg.w)[0, :3] @ proj       # (3 windows, w+1, N, d)
print("input windows", x.shape)

fw = diig.forward(cfg, diig.as_constants(params), x)
print("intra attention", fw.a_spa.shape, "row sums", np.round(fw.a_spa.data.sum(-1)[0, 0], 12))
print("spatial embeddings", fw.h_spa.shape)
print("fused embeddings", fw.h_fuse.shape)
print("temporal embedding", fw.h_tem.shape)
print("class probabilities\n", np.round(fw.probs.data, 4))

# Gradients come from the same forward pass recorded on a tape.
y = diig.one_hot([ds.sequences[0].label] * 3, cfg.C)
with Tape() as tape:
    leaves = params.leaves(tape)
    loss = diig.classification_loss(diig.forward(cfg, leaves, x).probs, y)
grads = nx.backward(tape, loss)
print("loss", round(float(loss.data), 4))
for name in ("W_spa", "W_tem", "W_o"):
    print(f"  |dL/d{name}| = {np.linalg.norm(grads[name]):.2e}")

# With w=0 the window is a single graph and the temporal stage is skipped.
cfg0 = diig.ModelConfig(w=0)
fw0 = diig.forward(cfg0, diig.as_constants(diig.init_params(cfg0, seed=0)), x[:, -1:])
print("w=0: temporal == fused:", np.array_equal(fw0.h_tem.data, fw0.h_fuse.data[:, 0]))
