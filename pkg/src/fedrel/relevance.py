"""Local data-distribution vectors for relevance-weighted aggregation.

A participant pretrains a small Gaussian VAE on its own reshaped data points
(one ``N*D`` vector per time step), summarises the shard as the mean latent
code ``d``, and keeps a learnable estimator ``g_theta`` that maps ``d`` to its
guess ``d_hat`` of the global vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ParamSet, Tape, Tensor


@dataclass
class VaeConfig:
    latent: int = 8
    hidden: int = 32
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1.5e-3


def vae_shapes(input_dim: int, cfg: VaeConfig) -> dict[str, tuple[int, ...]]:
    h, z = cfg.hidden, cfg.latent
    return {
        "enc_W1": (input_dim, h), "enc_b1": (h,),
        "enc_Wmu": (h, z), "enc_bmu": (z,),
        "enc_Wlv": (h, z), "enc_blv": (z,),
        "dec_W1": (z, h), "dec_b1": (h,),
        "dec_W2": (h, input_dim), "dec_b2": (input_dim,),
    }


def init_vae(input_dim: int, cfg: VaeConfig, rng) -> ParamSet:
    ps = ParamSet(vae_shapes(input_dim, cfg))
    for k, shp in ps.shapes.items():
        if "_W" in k:
            ps[k] = nx.xavier_init(shp, rng)
    return ps


def reshape_points(values: np.ndarray) -> np.ndarray:
    """``(M, T, N, D)`` sequences -> ``(M*T, N*D)`` data points."""
    values = np.asarray(values, dtype=np.float64)
    m, t, n, d = values.shape
    return values.reshape(m * t, n * d)


def encode(p: dict[str, Tensor], s) -> tuple[Tensor, Tensor]:
    """Encoder outputs ``(mu, log_var)``."""
    h = nx.sigmoid(nx.dense(nx.as_tensor(s), p["enc_W1"], p["enc_b1"]))
    return nx.dense(h, p["enc_Wmu"], p["enc_bmu"]), nx.dense(h, p["enc_Wlv"], p["enc_blv"])


def decode(p: dict[str, Tensor], z) -> Tensor:
    h = nx.sigmoid(nx.dense(nx.as_tensor(z), p["dec_W1"], p["dec_b1"]))
    return nx.dense(h, p["dec_W2"], p["dec_b2"])


def kl_divergence(mu, log_var) -> Tensor:
    """KL(N(mu, diag exp(log_var)) || N(0, I)) per latent dimension."""
    mu, log_var = nx.as_tensor(mu), nx.as_tensor(log_var)
    inner = nx.sub(nx.sub(nx.add(log_var, 1.0), nx.square(mu)), nx.exp(log_var))
    return nx.scale(inner, -0.5)


def elbo_loss(p: dict[str, Tensor], s, eps) -> tuple[Tensor, Tensor]:
    """Negative ELBO per feature, averaged over the batch, and its KL part.

    Reconstruction is the squared error averaged over the ``N*D`` features;
    the KL summed over latent dimensions is divided by the same count, so the
    whole objective is the unit-variance Gaussian ELBO on a per-feature scale.
    ``eps`` is the standard-normal noise of the reparameterisation.
    """
    s = nx.as_tensor(s)
    batch, dim = s.shape
    mu, log_var = encode(p, s)
    z = nx.add(mu, nx.mul(nx.exp(nx.scale(log_var, 0.5)), eps))
    recon = nx.scale(nx.sum_all(nx.square(nx.sub(decode(p, z), s))), 1.0 / (batch * dim))
    kl = nx.scale(nx.sum_all(kl_divergence(mu, log_var)), 1.0 / (batch * dim))
    return nx.add(recon, kl), kl


def vae_pretrain(points: np.ndarray, cfg: VaeConfig | None = None, seed=0,
                 history: list | None = None) -> ParamSet:
    """Fit the VAE with Adam and return its (frozen) parameters.

    ``points`` is ``(num_points, N*D)``.  Per-epoch mean losses are appended
    to ``history`` when given.
    """
    cfg = cfg or VaeConfig()
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("vae_pretrain needs a non-empty (num_points, features) array")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ps = init_vae(points.shape[1], cfg, rng)
    state = nx.OptState(lr=cfg.lr)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(points))
        losses = []
        for lo in range(0, len(points), cfg.batch_size):
            batch = points[order[lo:lo + cfg.batch_size]]
            eps = rng.standard_normal((len(batch), cfg.latent))
            with Tape() as tape:
                loss, _ = elbo_loss(ps.leaves(tape), batch, eps)
            nx.adam_step(ps, nx.backward(tape, loss), state)
            losses.append(float(loss.data))
        if history is not None:
            history.append(float(np.mean(losses)))
    return ps


def elbo_value(phi: ParamSet, points: np.ndarray, seed=0) -> float:
    """Negative ELBO of ``points`` under ``phi`` with one noise draw per point."""
    points = np.asarray(points, dtype=np.float64)
    latent = phi.shapes["enc_bmu"][0]
    eps = np.random.default_rng(seed).standard_normal((len(points), latent))
    loss, _ = elbo_loss({k: Tensor(v) for k, v in phi.items()}, points, eps)
    return float(loss.data)


def encode_latent(s, phi: ParamSet) -> np.ndarray:
    """Posterior mean for one point (``ND``) or a batch (``(M, ND)``)."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != phi.shapes["enc_W1"][0]:
        raise ValueError(f"point has {s.shape[-1]} features, encoder expects {phi.shapes['enc_W1'][0]}")
    mu, _ = encode({k: Tensor(v) for k, v in phi.items()}, s if s.ndim > 1 else s[None, :])
    return mu.data if s.ndim > 1 else mu.data[0]


def local_distribution(points: np.ndarray, phi: ParamSet) -> np.ndarray:
    """Mean latent code over a shard's data points."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("local_distribution needs at least one data point")
    return encode_latent(points, phi).mean(axis=0)


# ------------------------------------------------------------------ estimator

def estimator_shapes(latent: int, hidden: int = 16) -> dict[str, tuple[int, ...]]:
    return {"est_W1": (latent, hidden), "est_b1": (hidden,), "est_W2": (hidden, latent), "est_b2": (latent,)}


def init_estimator(latent: int, rng, hidden: int = 16) -> ParamSet:
    ps = ParamSet(estimator_shapes(latent, hidden))
    for k in ("est_W1", "est_W2"):
        ps[k] = nx.xavier_init(ps.shapes[k], rng)
    return ps


def estimate_global(d, theta) -> Tensor:
    """``g_theta(d)``: latent -> sigmoid hidden -> latent.

    ``theta`` is a ParamSet or a name -> Tensor mapping (tape leaves).
    """
    if isinstance(theta, ParamSet):
        theta = {k: Tensor(v) for k, v in theta.items()}
    d = nx.as_tensor(d)
    if d.shape[-1] != theta["est_W1"].shape[0]:
        raise ValueError(f"d has dimension {d.shape[-1]}, estimator expects {theta['est_W1'].shape[0]}")
    row = nx.reshape(d, (1, d.shape[-1])) if d.ndim == 1 else d
    h = nx.sigmoid(nx.dense(row, theta["est_W1"], theta["est_b1"]))
    out = nx.dense(h, theta["est_W2"], theta["est_b2"])
    return nx.reshape(out, d.shape) if d.ndim == 1 else out


def mse(a, b) -> Tensor:
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"MSE shape mismatch {a.shape} vs {b.shape}")
    return nx.mean(nx.square(nx.sub(a, b)))


@dataclass
class DistributionState:
    """One participant's distribution bookkeeping."""

    phi: ParamSet
    theta: ParamSet
    d: np.ndarray
    d_hat: np.ndarray | None = None
    d_tilde: np.ndarray | None = None

    def refresh_estimate(self) -> np.ndarray:
        self.d_hat = estimate_global(self.d, self.theta).data.copy()
        return self.d_hat
