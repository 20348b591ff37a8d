"""Dynamic Inter-Intra Graph (DIIG) classifier.

A window of ``w + 1`` spatial graphs (nodes are channels) is classified in
four stages:

1. intra block - per time step, a learned attention adjacency over node
   features drives ``L`` message-passing layers, followed by a graph readout;
2. fusion - each node embedding is concatenated with its graph embedding,
   squashed and layer-normalised;
3. inter block - fused embeddings are propagated recursively through the
   window, each step attending from the newer graph's nodes to the running
   embedding of the older one;
4. head - spatial and temporal embeddings of the last step are mapped to
   class scores, averaged over nodes and soft-maxed.

All stage functions take :class:`~fedrel.numerics.Tensor` inputs with
optional leading batch axes, so the same code runs on one window or a batch.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import ParamSet, Tape, Tensor

PROB_FLOOR = 1e-12


@dataclass
class ModelConfig:
    d: int = 16
    node_emb: int = 32
    graph_emb: int = 64
    readout_hidden: tuple[int, ...] = (32, 64)
    L: int = 2
    w: int = 2
    C: int = 4
    dropout: float = 0.3
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.readout_hidden = tuple(int(n) for n in self.readout_hidden)
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if self.w < 0:
            raise ValueError(f"w must be >= 0, got {self.w}")
        dims = (self.d, self.node_emb, self.graph_emb, self.C, *self.readout_hidden)
        if min(dims) <= 0:
            raise ValueError(f"dimensions must be positive, got {dims}")
        if self.C < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["readout_hidden"] = list(self.readout_hidden)
        return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered names and shapes of every trainable DIIG tensor.

    Weights use the row-vector convention ``y = x @ W + b``.
    """
    e, g = cfg.node_emb, cfg.graph_emb
    shapes: dict[str, tuple[int, ...]] = {"W_spa": (cfg.d, cfg.d)}
    d_in = cfg.d
    for l in range(1, cfg.L + 1):
        shapes[f"W_agg_{l}"] = (2 * d_in, e)
        shapes[f"b_agg_{l}"] = (e,)
        d_in = e
    widths = (e + cfg.d, *cfg.readout_hidden, g)
    for i in range(len(widths) - 1):
        shapes[f"W_pool_{i + 1}"] = (widths[i], widths[i + 1])
        shapes[f"b_pool_{i + 1}"] = (widths[i + 1],)
    shapes["W_fuse"] = (e + g, e)
    shapes["b_fuse"] = (e,)
    shapes["ln_gamma"] = (e,)
    shapes["ln_beta"] = (e,)
    shapes["W_tem"] = (e, e)
    shapes["W_agg_tem"] = (2 * e, e)
    shapes["b_agg_tem"] = (e,)
    shapes["W_o"] = (2 * e, cfg.C)
    shapes["b_o"] = (cfg.C,)
    return shapes


def init_params(cfg: ModelConfig, seed) -> ParamSet:
    """Xavier weights, zero biases, identity layer-norm affine."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ps = ParamSet(param_shapes(cfg))
    for name, shape in ps.shapes.items():
        if name == "ln_gamma":
            ps[name] = np.ones(shape)
        elif name.startswith("W_"):
            ps[name] = nx.xavier_init(shape, rng)
    return ps


# --------------------------------------------------------------- stage ops

def transform_features(s, theta: dict[str, Tensor]) -> Tensor:
    """Per-channel, per-step two-layer net mapping raw D-vectors to d-vectors."""
    s = nx.as_tensor(s)
    w1 = theta["W_t1"]
    if s.shape[-1] != w1.shape[0]:
        raise ValueError(f"raw dimension {s.shape[-1]} does not match transform input {w1.shape[0]}")
    hidden = nx.sigmoid(nx.dense(s, w1, theta["b_t1"]))
    return nx.dense(hidden, theta["W_t2"], theta["b_t2"])


def intra_correlation(x, W_spa) -> Tensor:
    """Row-stochastic attention adjacency ``softmax_j(x_i W x_j)``."""
    x, W_spa = nx.as_tensor(x), nx.as_tensor(W_spa)
    if W_spa.shape != (x.shape[-1], x.shape[-1]):
        raise ValueError(f"W_spa shape {W_spa.shape} does not match features {x.shape}")
    scores = nx.matmul(nx.matmul(x, W_spa), nx.swap_last(x))
    return nx.softmax_row(scores)


def message_pass(a, h, W_agg, b_agg=None) -> Tensor:
    """``sigmoid([h, (1/N) A h] @ W + b)``; the 1/N factor is kept as written."""
    a, h, W_agg = nx.as_tensor(a), nx.as_tensor(h), nx.as_tensor(W_agg)
    n = h.shape[-2]
    if a.shape[-2:] != (n, n):
        raise ValueError(f"adjacency {a.shape} does not match {n} nodes")
    if W_agg.shape[0] != 2 * h.shape[-1]:
        raise ValueError(f"W_agg expects input width {W_agg.shape[0]}, got 2 x {h.shape[-1]}")
    agg = nx.scale(nx.matmul(a, h), 1.0 / n)
    return nx.sigmoid(nx.dense(nx.concat([h, agg], axis=-1), W_agg, b_agg))


def graph_readout(h_last, x, pool: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Mean over nodes of ``[h_i, x_i]`` followed by the pooling MLP.

    Hidden layers use sigmoid; the final layer is linear.
    """
    h_last, x = nx.as_tensor(h_last), nx.as_tensor(x)
    if h_last.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"embeddings {h_last.shape} and features {x.shape} disagree")
    z = nx.mean(nx.concat([h_last, x], axis=-1), axis=-2)
    single = z.ndim == 1
    if single:
        z = nx.reshape(z, (1, z.shape[0]))
    for i, (w, b) in enumerate(pool):
        z = nx.dense(z, w, b)
        if i < len(pool) - 1:
            z = nx.sigmoid(z)
    return nx.reshape(z, (z.shape[-1],)) if single else z


def fuse_embeddings(h_spa, g, W_fuse, b_fuse=None, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    h_spa, g = nx.as_tensor(h_spa), nx.as_tensor(g)
    if h_spa.shape[:-2] != g.shape[:-1]:
        raise ValueError(f"node embeddings {h_spa.shape} and graph embedding {g.shape} disagree")
    n = h_spa.shape[-2]
    g_rows = nx.expand(nx.reshape(g, (*g.shape[:-1], 1, g.shape[-1])), (*g.shape[:-1], n, g.shape[-1]))
    z = nx.sigmoid(nx.dense(nx.concat([h_spa, g_rows], axis=-1), W_fuse, b_fuse))
    return nx.layer_norm(z, gamma, beta, eps=eps)


def inter_correlation(h_t, h_prev, W_tem) -> Tensor:
    """Row ``i`` (node at the newer step) attends over nodes ``j`` of the older step."""
    h_t, h_prev = nx.as_tensor(h_t), nx.as_tensor(h_prev)
    if h_t.shape != h_prev.shape:
        raise ValueError(f"consecutive graphs disagree: {h_t.shape} vs {h_prev.shape}")
    scores = nx.matmul(nx.matmul(h_t, W_tem), nx.swap_last(h_prev))
    return nx.softmax_row(scores)


def temporal_propagate(h_fuse, W_tem, W_agg_tem, b_agg_tem=None, w: int | None = None,
                       dropout=None) -> Tensor:
    """Recursive message passing through the window ``(..., w+1, N, e)``.

    Seeded at the oldest fused embedding; step ``k`` builds the inter
    adjacency between step ``k``'s fused embedding and the running
    embedding, then message-passes the running embedding through it.
    ``dropout`` is an optional callable applied after each step.
    """
    h_fuse = nx.as_tensor(h_fuse)
    steps = h_fuse.shape[-3]
    if w is not None and steps != w + 1:
        raise ValueError(f"window holds {steps} graphs, expected w+1 = {w + 1}")
    if steps == 1:
        return nx.take(h_fuse, 0, axis=-3)
    cur = nx.take(h_fuse, 0, axis=-3)
    for k in range(1, steps):
        nxt = nx.take(h_fuse, k, axis=-3)
        a_tem = inter_correlation(nxt, cur, W_tem)
        cur = message_pass(a_tem, cur, W_agg_tem, b_agg_tem)
        if dropout is not None:
            cur = dropout(cur)
    return cur


def final_embedding(h_spa_last, h_tem, W_o, b_o=None) -> Tensor:
    h_spa_last, h_tem = nx.as_tensor(h_spa_last), nx.as_tensor(h_tem)
    if h_spa_last.shape[:-1] != h_tem.shape[:-1]:
        raise ValueError(f"spatial {h_spa_last.shape} and temporal {h_tem.shape} embeddings disagree")
    return nx.sigmoid(nx.dense(nx.concat([h_spa_last, h_tem], axis=-1), W_o, b_o))


def predict_logits(h_emb) -> Tensor:
    """Softmax of the node-averaged class scores."""
    h_emb = nx.as_tensor(h_emb)
    if h_emb.shape[-2] < 1:
        raise ValueError("need at least one node")
    return nx.softmax_row(nx.mean(h_emb, axis=-2))


def classification_loss(z, y) -> Tensor:
    """Categorical cross-entropy, averaged over any batch axis.

    ``y`` is one-hot with the same shape as ``z``.
    """
    z = nx.as_tensor(z)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError(f"one-hot shape {y.shape} != prediction shape {z.shape}")
    if not (np.isin(y, (0.0, 1.0)).all() and np.all(y.sum(axis=-1) == 1.0)):
        raise ValueError("labels are not a valid one-hot encoding")
    nll = nx.neg(nx.mul(nx.log(z, floor=PROB_FLOOR), y))
    batch = int(np.prod(z.shape[:-1])) if z.ndim > 1 else 1
    return nx.scale(nx.sum_all(nll), 1.0 / batch)


def one_hot(labels, C: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label outside [0, {C})")
    out = np.zeros((*labels.shape, C))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


# ------------------------------------------------------------------- model

@dataclass
class Forward:
    """Intermediate tensors of one forward pass (handy for inspection)."""

    probs: Tensor
    h_spa: Tensor = field(repr=False)
    h_fuse: Tensor = field(repr=False)
    h_tem: Tensor = field(repr=False)
    a_spa: Tensor = field(repr=False)


def forward(cfg: ModelConfig, p: dict[str, Tensor], x, *, adjacency=None,
            rng: np.random.Generator | None = None) -> Forward:
    """Run DIIG on node features ``x`` of shape ``(..., w+1, N, d)``.

    ``p`` maps parameter names to tensors (tape leaves when gradients are
    wanted).  Passing ``rng`` switches dropout on.  ``adjacency`` replaces the
    learned intra adjacency with a fixed one, broadcastable to
    ``(..., w+1, N, N)``.
    """
    x = nx.as_tensor(x)
    if x.ndim < 3:
        raise ValueError(f"expected (..., w+1, N, d) features, got {x.shape}")
    if x.ndim == 3:
        x = nx.reshape(x, (1, *x.shape))
    *lead, steps, n, d = x.shape
    if steps != cfg.w + 1:
        raise ValueError(f"window has {steps} graphs but w = {cfg.w}")
    if d != cfg.d:
        raise ValueError(f"feature dim {d} != configured d = {cfg.d}")

    def drop(t: Tensor) -> Tensor:
        if rng is None or cfg.dropout == 0.0:
            return t
        keep = 1.0 - cfg.dropout
        mask = (rng.random(t.shape) < keep) / keep
        return nx.mul(t, mask)

    if adjacency is None:
        a_spa = intra_correlation(x, p["W_spa"])
    else:
        a_spa = nx.Tensor(np.broadcast_to(np.asarray(adjacency, dtype=np.float64), (*lead, steps, n, n)))
    h = x
    for l in range(1, cfg.L + 1):
        h = drop(message_pass(a_spa, h, p[f"W_agg_{l}"], p[f"b_agg_{l}"]))
    n_pool = len(cfg.readout_hidden) + 1
    pool = [(p[f"W_pool_{i}"], p[f"b_pool_{i}"]) for i in range(1, n_pool + 1)]
    g = graph_readout(h, x, pool)
    h_fuse = fuse_embeddings(h, g, p["W_fuse"], p["b_fuse"], p["ln_gamma"], p["ln_beta"], eps=cfg.ln_eps)
    h_tem = temporal_propagate(h_fuse, p["W_tem"], p["W_agg_tem"], p["b_agg_tem"], w=cfg.w, dropout=drop)
    h_last = nx.take(h, steps - 1, axis=-3)
    h_emb = final_embedding(h_last, h_tem, p["W_o"], p["b_o"])
    return Forward(predict_logits(h_emb), h, h_fuse, h_tem, a_spa)


def as_constants(params: ParamSet) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def predict_proba(cfg: ModelConfig, params: ParamSet, x, batch_size: int = 256, adjacency=None) -> np.ndarray:
    """Class probabilities without recording a tape or applying dropout."""
    x = np.asarray(x, dtype=np.float64)
    p = as_constants(params)
    out = []
    for lo in range(0, len(x), batch_size):
        adj = None if adjacency is None else adjacency[lo:lo + batch_size]
        out.append(forward(cfg, p, x[lo:lo + batch_size], adjacency=adj).probs.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.C))


def loss_and_grads(cfg: ModelConfig, params: ParamSet, x, y_onehot, rng=None,
                   adjacency=None) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        leaves = params.leaves(tape)
        fw = forward(cfg, leaves, x, rng=rng, adjacency=adjacency)
        loss = classification_loss(fw.probs, y_onehot)
    return float(loss.data), nx.backward(tape, loss)


# ------------------------------------------------------- feature transform

def transform_shapes(D: int, d: int, hidden: int = 32) -> dict[str, tuple[int, ...]]:
    return {"W_t1": (D, hidden), "b_t1": (hidden,), "W_t2": (hidden, d), "b_t2": (d,)}


def apply_transform(theta: ParamSet, s) -> np.ndarray:
    """Transform raw signals ``(..., D)`` to features ``(..., d)`` without a tape."""
    return transform_features(np.asarray(s, dtype=np.float64), as_constants(theta)).data


def pretrain_transform(signals: np.ndarray, labels: np.ndarray, C: int, d: int = 16, hidden: int = 32,
                       epochs: int = 5, batch_size: int = 8, lr: float = 1.5e-3, seed: int = 0) -> ParamSet:
    """Fit the transform net once on a labelled pool, then return it frozen.

    ``signals`` is ``(M, T, N, D)``.  A throwaway linear head scores every
    (step, channel) feature vector and the scores are averaged before the
    softmax, mirroring the node-averaged DIIG head; only the transform
    weights are kept.
    """
    signals = np.asarray(signals, dtype=np.float64)
    m, _, n, D = signals.shape
    rng = np.random.default_rng(seed)
    shapes = transform_shapes(D, d, hidden)
    shapes.update({"W_head": (d, C), "b_head": (C,)})
    ps = ParamSet(shapes)
    for k, shp in ps.shapes.items():
        if k.startswith("W_"):
            ps[k] = nx.xavier_init(shp, rng)
    state = nx.OptState(lr=lr)
    y = one_hot(labels, C)
    for _ in range(epochs):
        order = rng.permutation(m)
        for lo in range(0, m, batch_size):
            idx = order[lo:lo + batch_size]
            with Tape() as tape:
                p = ps.leaves(tape)
                feats = transform_features(signals[idx], p)            # (B, T, N, d)
                scores = nx.dense(feats, p["W_head"], p["b_head"])      # (B, T, N, C)
                scores = nx.reshape(scores, (len(idx), -1, C))
                probs = nx.softmax_row(nx.mean(scores, axis=1))
                loss = classification_loss(probs, y[idx])
            nx.adam_step(ps, nx.backward(tape, loss), state)
    theta = ParamSet(transform_shapes(D, d, hidden))
    for k in theta:
        theta[k] = ps[k]
    return theta


# --------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"FRPM1"


def save_params(params: ParamSet, path) -> None:
    """Write a name -> tensor map: magic, u32 count, then per entry
    u32 name length, UTF-8 name, u32 rank, u32 dims, float64 values
    (all little-endian)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> ParamSet:
    from .synthdata import MalformedHeader, TruncatedPayload

    buf = Path(path).read_bytes()
    if buf[:5] != CHECKPOINT_MAGIC:
        raise MalformedHeader(f"{path}: bad magic {buf[:5]!r}")
    pos = 5

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise TruncatedPayload(f"{path}: truncated payload at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = read("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = read("<I")
        if pos + nlen > len(buf):
            raise TruncatedPayload(f"{path}: truncated payload at byte {pos}")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<I")
        shape = read(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(buf):
            raise TruncatedPayload(f"{path}: truncated payload in {name!r}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise MalformedHeader(f"{path}: {len(buf) - pos} trailing bytes")
    return ParamSet.from_arrays(arrays)
