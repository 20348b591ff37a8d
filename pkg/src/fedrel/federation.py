"""In-process federated simulation: relevance-weighted training and baselines.

Every participant owns its shard, model copy, Adam moments and RNG streams,
so rounds give the same numbers whether participants run one after another
or on a thread pool.  The server is a plain synchronisation point; uploads
and downloads are round-stamped envelope records rather than sockets.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diig
from . import numerics as nx
from . import relevance as rel
from . import synthdata as sd
from .metrics import RoundMetrics, classification_report
from .numerics import OptState, ParamSet, Tape

MODES = ("fedrel", "fedavg", "fedp", "fedatt", "central")
PARTITIONS = ("dirichlet", "identical")

# spawn keys for the seeded streams; keeping them apart is what lets two
# modes share a trajectory when their extra machinery is inert
_GLOBAL_INIT, _PARTICIPANT, _SERVER = 0, 1, 2


class ParticipantFailure(RuntimeError):
    def __init__(self, round_: int, pid: int, cause: BaseException):
        super().__init__(f"round {round_}, participant {pid}: {type(cause).__name__}: {cause}")
        self.round = round_
        self.pid = pid
        self.cause = cause


@dataclass
class FedConfig:
    K: int = 3
    rounds: int = 150
    local_epochs: int = 1
    batch_size: int = 8
    lr: float = 1.5e-3
    mode: str = "fedrel"
    fedp_fraction: float = 0.6
    fedatt_step: float = 1.5e-3
    alpha: float = 0.5
    partition: str = "dirichlet"
    windows_per_sequence: int = 2     # 0 means every window every epoch
    vae_latent: int = 8
    vae_hidden: int = 32
    vae_epochs: int = 30
    estimator_hidden: int = 16
    same_seed: bool = False           # every participant draws from the same streams
    track_train: bool = False         # also report accuracy on the training pool
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.partition not in PARTITIONS:
            raise ValueError(f"unknown partition {self.partition!r}; expected one of {PARTITIONS}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not 0.0 < self.fedp_fraction <= 1.0:
            raise ValueError(f"fedp_fraction must be in (0, 1], got {self.fedp_fraction}")
        if self.local_epochs < 0 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("local_epochs >= 0, batch_size >= 1 and workers >= 1 required")
        if self.windows_per_sequence < 0:
            raise ValueError("windows_per_sequence must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def vae_config(self) -> rel.VaeConfig:
        return rel.VaeConfig(latent=self.vae_latent, hidden=self.vae_hidden, epochs=self.vae_epochs,
                             batch_size=self.batch_size, lr=self.lr)


# ------------------------------------------------------------------- data

@dataclass
class Shard:
    """Windowed features of one set of sequences."""

    windows: np.ndarray     # (M, T-w, w+1, N, d)
    labels: np.ndarray      # (M,)
    raw: np.ndarray         # (M, T, N, D), the VAE's input

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError("shard is empty")

    def __len__(self) -> int:
        return len(self.labels)

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        m, nw = self.windows.shape[:2]
        return self.windows.reshape(m * nw, *self.windows.shape[2:]), np.repeat(self.labels, nw)


@dataclass
class FedData:
    model: diig.ModelConfig
    transform: ParamSet
    shards: list[Shard]
    pool: Shard
    test: Shard


def _shard(ds: sd.Dataset, transform: ParamSet, w: int) -> Shard:
    raw = ds.values()
    feats = diig.apply_transform(transform, raw)
    return Shard(sd.window_array(feats, w), ds.labels, raw)


def prepare_data(ds: sd.Dataset, model: diig.ModelConfig, K: int, partition: str = "dirichlet",
                 alpha: float = 0.5, seed: int = 0, transform_epochs: int = 50,
                 train_fraction: float = 0.8, transform: ParamSet | None = None) -> FedData:
    """Split 80/20, fit the frozen feature transform on the training pool,
    shard the pool and cut every sequence into windows.

    A ``transform`` passed in (e.g. from a checkpoint) is used as is.
    """
    if ds.num_classes != model.C:
        raise ValueError(f"dataset has {ds.num_classes} classes, model expects {model.C}")
    train, test = sd.train_test_split(ds, train_fraction, seed)
    if transform is None:
        transform = diig.pretrain_transform(train.values(), train.labels, model.C, d=model.d,
                                            epochs=transform_epochs, seed=seed)
    if partition == "identical":
        parts = sd.replicate(train, K)
    elif partition == "dirichlet":
        parts = sd.partition_noniid(train, sd.PartitionSpec(K, alpha, seed))
    else:
        raise ValueError(f"unknown partition {partition!r}")
    pool = _shard(train, transform, model.w)
    return FedData(model, transform, [_shard(p, transform, model.w) for p in parts], pool,
                   _shard(test, transform, model.w))


def epoch_batches(rng: np.random.Generator, n_seq: int, n_win: int, per_seq: int,
                  batch_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled (sequence, window) index batches for one epoch.

    With ``0 < per_seq < n_win`` each sequence contributes ``per_seq``
    distinct windows drawn afresh every epoch.
    """
    if per_seq <= 0 or per_seq >= n_win:
        seq = np.repeat(np.arange(n_seq), n_win)
        win = np.tile(np.arange(n_win), n_seq)
    else:
        picks = np.argsort(rng.random((n_seq, n_win)), axis=1)[:, :per_seq]
        seq = np.repeat(np.arange(n_seq), per_seq)
        win = picks.reshape(-1)
    order = rng.permutation(len(seq))
    seq, win = seq[order], win[order]
    return [(seq[lo:lo + batch_size], win[lo:lo + batch_size]) for lo in range(0, len(seq), batch_size)]


# ---------------------------------------------------------- protocol types

@dataclass
class Participant:
    pid: int
    shard: Shard
    params: ParamSet
    opt: OptState
    rng: np.random.Generator
    dist: rel.DistributionState | None = None
    est_opt: OptState | None = None
    last_loss: float = float("nan")


@dataclass(frozen=True)
class Upload:
    round: int
    pid: int
    params: ParamSet
    d_hat: np.ndarray | None
    theta: ParamSet | None = None   # logged, never aggregated


@dataclass(frozen=True)
class Download:
    round: int
    params: ParamSet
    d_tilde: np.ndarray | None


@dataclass
class ServerState:
    params: ParamSet
    d_tilde: np.ndarray | None = None
    round: int = 0
    relevance_history: list[np.ndarray] = field(default_factory=list)

    def record(self, r: np.ndarray) -> None:
        r = np.asarray(r, dtype=np.float64)
        if abs(r.sum() - 1.0) > 1e-9:
            raise AssertionError(f"round {self.round}: relevance sums to {r.sum()!r}")
        self.relevance_history.append(r)


# ------------------------------------------------------------- server ops

def synthesize_global(d_hats: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of the participants' global-vector estimates."""
    if len(d_hats) == 0:
        raise ValueError("synthesize_global needs at least one vector")
    stack = np.stack([np.asarray(v, dtype=np.float64) for v in d_hats])
    return stack.mean(axis=0)


def relevance_scores(d_hats: Sequence[np.ndarray], d_tilde: np.ndarray) -> np.ndarray:
    """Softmax over participants of ``||d_hat_k - d_tilde||``; far means heavy."""
    d_tilde = np.asarray(d_tilde, dtype=np.float64)
    if len(d_hats) == 0:
        raise ValueError("relevance_scores needs at least one vector")
    dist = np.empty(len(d_hats))
    for k, v in enumerate(d_hats):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != d_tilde.shape:
            raise ValueError(f"participant {k}: vector shape {v.shape} != global {d_tilde.shape}")
        dist[k] = np.linalg.norm(v - d_tilde)
    return softmax(dist)


def softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _check_names(params: Sequence[ParamSet]) -> None:
    ref = params[0]
    for k, p in enumerate(params[1:], start=1):
        if not p.same_layout(ref):
            diff = sorted(set(p.names) ^ set(ref.names))
            if not diff:
                diff = sorted(n for n in ref.names if p.shapes[n] != ref.shapes[n])
            raise ValueError(f"participant {k} parameters differ from participant 0 in: {', '.join(diff)}")


def aggregate_weights(params: Sequence[ParamSet], r) -> ParamSet:
    """Per-name convex combination ``sum_k r_k * params_k``.

    Accumulates in participant order so the result does not depend on
    scheduling.
    """
    r = np.asarray(r, dtype=np.float64)
    if len(params) == 0 or len(params) != len(r):
        raise ValueError(f"got {len(params)} parameter sets and {len(r)} weights")
    if abs(r.sum() - 1.0) > 1e-9 or (r < 0).any():
        raise ValueError(f"aggregation weights must be a probability vector, got {r}")
    _check_names(params)
    acc = r[0] * params[0].flat
    for w, p in zip(r[1:], params[1:]):
        acc = acc + w * p.flat
    return params[0].like(acc)


def fedatt_aggregate(global_params: ParamSet, params: Sequence[ParamSet],
                     step: float) -> tuple[ParamSet, np.ndarray]:
    """Layer-wise attentive step of the global model toward the participants.

    For each named tensor the attention over participants is the softmax of
    ``||global - local||_2``; the global tensor moves by
    ``-step * sum_k att_k (global - local_k)``.  Returns the new model and the
    attention averaged over tensors.
    """
    _check_names([global_params, *params])
    out = global_params.copy()
    att_sum = np.zeros(len(params))
    for name in global_params.names:
        g = global_params[name]
        diffs = [g - p[name] for p in params]
        att = softmax(np.array([np.linalg.norm(dv) for dv in diffs]))
        move = att[0] * diffs[0]
        for a, dv in zip(att[1:], diffs[1:]):
            move = move + a * dv
        out[name] = g - step * move
        att_sum += att
    return out, att_sum / len(global_params.names)


# ------------------------------------------------------------ participants

def participant_streams(seed: int, pid: int, same_seed: bool = False) -> tuple[np.random.Generator, ...]:
    """Independent generators for (training, VAE, estimator init)."""
    key = 0 if same_seed else pid
    ss = np.random.SeedSequence([seed, _PARTICIPANT, key])
    return tuple(np.random.default_rng(s) for s in ss.spawn(3))


def global_init(model: diig.ModelConfig, seed: int) -> ParamSet:
    return diig.init_params(model, np.random.default_rng(np.random.SeedSequence([seed, _GLOBAL_INIT])))


def make_participants(data: FedData, cfg: FedConfig, theta0: ParamSet,
                      with_distribution: bool) -> list[Participant]:
    out = []
    for pid, shard in enumerate(data.shards):
        train_rng, vae_rng, est_rng = participant_streams(cfg.seed, pid, cfg.same_seed)
        p = Participant(pid, shard, theta0.copy(), OptState(lr=cfg.lr), train_rng)
        if with_distribution:
            points = rel.reshape_points(shard.raw)
            phi = rel.vae_pretrain(points, cfg.vae_config(), vae_rng)
            theta = rel.init_estimator(cfg.vae_latent, est_rng, cfg.estimator_hidden)
            p.dist = rel.DistributionState(phi, theta, rel.local_distribution(points, phi))
            p.dist.refresh_estimate()
            p.est_opt = OptState(lr=cfg.lr)
        out.append(p)
    return out


def _train_step(model: diig.ModelConfig, p: Participant, xb: np.ndarray, yb: np.ndarray,
                d_tilde: np.ndarray | None) -> float:
    """One Adam step; returns the classification part of the loss."""
    with Tape() as tape:
        leaves = p.params.leaves(tape)
        fw = diig.forward(model, leaves, xb, rng=p.rng)
        loss = ce = diig.classification_loss(fw.probs, yb)
        if d_tilde is not None:
            est = p.dist.theta.leaves(tape)
            d_hat = rel.estimate_global(p.dist.d, est)
            loss = nx.add(loss, rel.mse(d_hat, d_tilde))
    grads = nx.backward(tape, loss)
    nx.adam_step(p.params, {k: grads[k] for k in p.params.names}, p.opt)
    if d_tilde is not None:
        nx.adam_step(p.dist.theta, {k: grads[k] for k in p.dist.theta.names}, p.est_opt)
    return float(ce.data)


def local_update(p: Participant, global_params: ParamSet, d_tilde: np.ndarray | None, epochs: int,
                 model: diig.ModelConfig, cfg: FedConfig) -> tuple[ParamSet, ParamSet | None, np.ndarray | None]:
    """Reset to the global model, train ``epochs`` passes over the shard and
    refresh the estimate of the global distribution vector.

    With ``d_tilde`` given the loss gains the MSE between ``g_theta(d)`` and
    ``d_tilde`` and the estimator is stepped too.
    """
    if not p.params.same_layout(global_params):
        _check_names([global_params, p.params])
    p.params.flat[:] = global_params.flat
    if d_tilde is not None and p.dist is None:
        raise ValueError(f"participant {p.pid} has no distribution state")
    m, nw = p.shard.windows.shape[:2]
    y = diig.one_hot(p.shard.labels, model.C)
    losses = []
    for _ in range(epochs):
        for seq, win in epoch_batches(p.rng, m, nw, cfg.windows_per_sequence, cfg.batch_size):
            losses.append(_train_step(model, p, p.shard.windows[seq, win], y[seq], d_tilde))
    p.last_loss = float(np.mean(losses)) if losses else float("nan")
    d_hat = p.dist.refresh_estimate() if p.dist is not None else None
    return p.params, (p.dist.theta if p.dist is not None else None), d_hat


def _run_locals(parts: Sequence[Participant], down: Download, cfg: FedConfig, model: diig.ModelConfig,
                use_distribution: bool) -> list[Upload]:
    def one(p: Participant) -> Upload:
        try:
            params, theta, d_hat = local_update(p, down.params, down.d_tilde if use_distribution else None,
                                            cfg.local_epochs, model, cfg)
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise ParticipantFailure(down.round, p.pid, exc) from exc
        return Upload(down.round, p.pid, params.copy(), None if d_hat is None else d_hat.copy(),
                      None if theta is None else theta.copy())

    if cfg.workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            ups = list(pool.map(one, parts))
    else:
        ups = [one(p) for p in parts]
    return sorted(ups, key=lambda u: u.pid)


# ------------------------------------------------------------- evaluation

def evaluate_params(model: diig.ModelConfig, params: ParamSet, shard: Shard) -> tuple[float, float, float]:
    x, y = shard.flat()
    return classification_report(diig.predict_proba(model, params, x), y)


def _metrics(rnd: int, mode: str, server: ServerState, data: FedData, cfg: FedConfig, r: np.ndarray,
             started: float, trained: Sequence[Participant]) -> RoundMetrics:
    acc, f1, loss = evaluate_params(data.model, server.params, data.test)
    train_acc = evaluate_params(data.model, server.params, data.pool)[0] if cfg.track_train else None
    if not math.isfinite(loss):
        raise nx.NumericError(f"round {rnd}: global test loss is not finite")
    losses = [p.last_loss for p in trained]
    return RoundMetrics(rnd, mode, loss, acc, f1, [float(v) for v in r],
                        (time.perf_counter() - started) * 1e3, train_acc, float(np.mean(losses)))


Callback = Callable[[RoundMetrics], None]


def run_fedrel(cfg: FedConfig, data: FedData, on_round: Callback | None = None,
               server_out: list | None = None) -> list[RoundMetrics]:
    """Relevance-weighted federated training.

    Round ``t``: download ``(Theta, d_tilde)``; every participant trains
    locally with the distribution-aware loss and re-estimates ``d_hat``;
    the server synthesises ``d_tilde``, scores relevance and aggregates.
    The initial ``d_hat`` vectors come from freshly initialised estimators,
    and the first download is the shared initial model, so aggregating the
    initial uploads would be a no-op and is skipped.
    """
    model = data.model
    server = ServerState(global_init(model, cfg.seed))
    parts = make_participants(data, cfg, server.params, with_distribution=True)
    d_hats = [p.dist.d_hat for p in parts]
    server.d_tilde = synthesize_global(d_hats)
    for p in parts:
        p.dist.d_tilde = server.d_tilde
    out = []
    for rnd in range(1, cfg.rounds + 1):
        started = time.perf_counter()
        server.round = rnd
        ups = _run_locals(parts, Download(rnd, server.params, server.d_tilde), cfg, model, True)
        d_hats = [u.d_hat for u in ups]
        server.d_tilde = synthesize_global(d_hats)
        r = relevance_scores(d_hats, server.d_tilde)
        server.record(r)
        server.params = aggregate_weights([u.params for u in ups], r)
        for p in parts:
            p.dist.d_tilde = server.d_tilde
        rec = _metrics(rnd, "fedrel", server, data, cfg, r, started, parts)
        out.append(rec)
        if on_round:
            on_round(rec)
    if server_out is not None:
        server_out.append(server)
    return out


def run_baseline(mode: str, cfg: FedConfig, data: FedData, on_round: Callback | None = None,
                 server_out: list | None = None) -> list[RoundMetrics]:
    """FedAvg, FedP, FedAtt or centralised training on the pooled split."""
    if mode not in ("fedavg", "fedp", "fedatt", "central"):
        raise ValueError(f"unknown baseline mode {mode!r}")
    model = data.model
    server = ServerState(global_init(model, cfg.seed))
    if mode == "central":
        # one participant holding the whole pool; r = (1) makes the
        # aggregation an exact copy
        data = FedData(data.model, data.transform, [data.pool], data.pool, data.test)
    parts = make_participants(data, cfg, server.params, with_distribution=False)
    K = len(parts)
    server_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SERVER]))
    out = []
    for rnd in range(1, cfg.rounds + 1):
        started = time.perf_counter()
        server.round = rnd
        chosen = list(range(K))
        if mode == "fedp":
            m = math.ceil(cfg.fedp_fraction * K)
            chosen = sorted(int(i) for i in server_rng.choice(K, size=m, replace=False))
        ups = _run_locals([parts[i] for i in chosen], Download(rnd, server.params, None), cfg, model, False)
        r = np.zeros(K)
        if mode == "fedatt":
            server.params, att = fedatt_aggregate(server.params, [u.params for u in ups], cfg.fedatt_step)
            r[:] = att
        else:
            weights = np.full(len(ups), 1.0 / len(ups))
            server.params = aggregate_weights([u.params for u in ups], weights)
            r[chosen] = weights
        server.record(r)
        rec = _metrics(rnd, mode, server, data, cfg, r, started, [parts[i] for i in chosen])
        out.append(rec)
        if on_round:
            on_round(rec)
    if server_out is not None:
        server_out.append(server)
    return out


def run(cfg: FedConfig, data: FedData, on_round: Callback | None = None,
        server_out: list | None = None) -> list[RoundMetrics]:
    if cfg.mode == "fedrel":
        return run_fedrel(cfg, data, on_round, server_out)
    return run_baseline(cfg.mode, cfg, data, on_round, server_out)
