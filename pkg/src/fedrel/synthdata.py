"""Synthetic spatial-temporal sequences, non-IID partitioning and windowing.

Each sequence is ``T`` steps of ``N`` channels, each step holding ``D`` raw
samples per channel (so a channel is a continuous signal of ``T * D``
samples cut into steps).  A channel's signal is a sinusoid plus a
deviation process that follows a first-order vector autoregression whose
coupling matrix depends on the class.  Classes therefore differ in how the
channels drive each other, which is exactly what the graph model is meant
to pick up.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FRDS1"


class ContainerError(ValueError):
    """Base class for malformed binary containers."""


class MalformedHeader(ContainerError):
    pass


class DimensionMismatch(ContainerError):
    pass


class TruncatedPayload(ContainerError):
    pass


@dataclass(frozen=True)
class RawSequence:
    values: np.ndarray      # (T, N, D)
    label: int


@dataclass
class Dataset:
    sequences: list[RawSequence]
    num_classes: int
    N: int
    D: int
    seed: int | None = None

    def __post_init__(self):
        for i, s in enumerate(self.sequences):
            if s.values.ndim != 3 or s.values.shape[1:] != (self.N, self.D):
                raise DimensionMismatch(f"sequence {i} has shape {s.values.shape}, expected (T, {self.N}, {self.D})")
            if not 0 <= s.label < self.num_classes:
                raise ValueError(f"sequence {i} label {s.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    @property
    def T(self) -> int:
        return self.sequences[0].values.shape[0]

    def values(self) -> np.ndarray:
        """All sequences stacked as ``(M, T, N, D)`` (requires equal T)."""
        return np.stack([s.values for s in self.sequences])

    def subset(self, idx) -> "Dataset":
        return Dataset([self.sequences[i] for i in idx], self.num_classes, self.N, self.D, self.seed)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class GeneratorConfig:
    N: int = 6
    D: int = 8
    C: int = 4
    T: int = 8
    num_sequences: int = 400
    noise: float = 1.0
    amplitude: float = 0.5
    spectral_radius: float = 0.95
    couplings: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("couplings")
        return out


def class_couplings(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """One ``N x N`` coupling matrix per class, pairwise distinct.

    Classes follow a two-factor layout: the sign of the self-coupling
    alternates with ``c`` and the strength of the random signed
    cross-channel links grows with ``c // 2``.  Both factors are visible
    whatever the channel order, which a node-permutation-invariant
    classifier needs.  Matrices whose spectral radius exceeds
    ``cfg.spectral_radius`` are rescaled.
    """
    n = cfg.N
    groups = (cfg.C + 1) // 2
    strengths = np.linspace(0.0, 1.0, groups) if groups > 1 else np.zeros(1)
    mats = []
    for c in range(cfg.C):
        sign = 1.0 if c % 2 == 0 else -1.0
        while True:
            links = rng.random((n, n)) < min(1.0, 2.0 / (n - 1))
            np.fill_diagonal(links, False)
            cross = links * rng.choice([-1.0, 1.0], size=(n, n)) * strengths[c // 2]
            m = sign * 0.6 * np.eye(n) + cross
            rho = np.max(np.abs(np.linalg.eigvals(m)))
            if rho > cfg.spectral_radius:
                m = m * (cfg.spectral_radius / rho)
            if all(not np.allclose(m, other) for other in mats):
                break
        mats.append(m)
    return np.stack(mats)


def generate(cfg: GeneratorConfig, seed: int) -> Dataset:
    """Draw ``cfg.num_sequences`` labelled sequences (classes round-robin).

    ``x(tau) = a * sin(2 pi f_n tau + phase_n) + e(tau)`` with
    ``e(tau) = M_c e(tau - 1) + noise * eps(tau)`` and ``e(0) = 0``.
    Frequencies are fixed per dataset, phases drawn per sequence.
    """
    if cfg.N < 2 or cfg.C < 2 or cfg.T < 8 or cfg.D < 1 or cfg.num_sequences < 1:
        raise ValueError(f"invalid generator dimensions: N={cfg.N} C={cfg.C} T={cfg.T} D={cfg.D} "
                         f"sequences={cfg.num_sequences} (need N>=2, C>=2, T>=8)")
    rng = np.random.default_rng(seed)
    couplings = cfg.couplings if cfg.couplings is not None else class_couplings(cfg, rng)
    couplings = np.asarray(couplings, dtype=np.float64)
    if couplings.shape != (cfg.C, cfg.N, cfg.N):
        raise ValueError(f"couplings must have shape {(cfg.C, cfg.N, cfg.N)}, got {couplings.shape}")
    freqs = rng.uniform(0.02, 0.2, size=cfg.N)
    length = cfg.T * cfg.D
    tau = np.arange(length)
    seqs = []
    for i in range(cfg.num_sequences):
        label = i % cfg.C
        phases = rng.uniform(0, 2 * np.pi, size=cfg.N)
        base = cfg.amplitude * np.sin(2 * np.pi * freqs[None, :] * tau[:, None] + phases[None, :])
        eps = rng.standard_normal((length, cfg.N))
        dev = np.zeros((length, cfg.N))
        m_t = couplings[label].T
        for k in range(1, length):
            dev[k] = dev[k - 1] @ m_t + cfg.noise * eps[k]
        x = base + dev                                      # (T*D, N)
        values = x.reshape(cfg.T, cfg.D, cfg.N).transpose(0, 2, 1).copy()
        seqs.append(RawSequence(values, label))
    return Dataset(seqs, cfg.C, cfg.N, cfg.D, seed)


def train_test_split(ds: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))


@dataclass(frozen=True)
class PartitionSpec:
    K: int
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")


def partition_noniid(ds: Dataset, spec: PartitionSpec, max_tries: int = 1000) -> list[Dataset]:
    """Dirichlet label-skew split into ``spec.K`` disjoint, non-empty shards.

    Every class is divided among participants according to its own
    ``Dirichlet(alpha)`` draw; draws leaving a shard empty are rejected.
    The shards together cover the whole pool.
    """
    if spec.K > len(ds):
        raise ValueError(f"cannot split {len(ds)} sequences into {spec.K} non-empty shards")
    if spec.K == 1:
        return [ds.subset(range(len(ds)))]
    rng = np.random.default_rng(spec.seed)
    labels = ds.labels
    for _ in range(max_tries):
        shards: list[list[int]] = [[] for _ in range(spec.K)]
        for c in range(ds.num_classes):
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(spec.K, spec.alpha))
            cuts = np.round(np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                shards[k].extend(part.tolist())
        if all(shards):
            return [ds.subset(sorted(s)) for s in shards]
    raise ValueError(f"no non-empty {spec.K}-way split found in {max_tries} draws (alpha={spec.alpha})")


def replicate(ds: Dataset, K: int) -> list[Dataset]:
    """``K`` identical shards (the degenerate IID setting)."""
    return [ds.subset(range(len(ds))) for _ in range(K)]


@dataclass(frozen=True)
class TemporalWindow:
    features: np.ndarray    # (w+1, N, d)
    label: int
    w: int


def make_windows(x: np.ndarray, label: int, w: int) -> list[TemporalWindow]:
    """All stride-1 windows of ``w + 1`` consecutive graphs from ``x`` (T, N, d)."""
    x = np.asarray(x)
    T = x.shape[0]
    if w < 0:
        raise ValueError(f"w must be >= 0, got {w}")
    if w >= T:
        raise ValueError(f"window w={w} needs at least {w + 1} steps, sequence has T={T}")
    return [TemporalWindow(x[t - w:t + 1], int(label), w) for t in range(w, T)]


def window_array(x: np.ndarray, w: int) -> np.ndarray:
    """Windows of a batch ``(M, T, N, d)`` as ``(M, T-w, w+1, N, d)``."""
    x = np.asarray(x)
    T = x.shape[1]
    if w >= T:
        raise ValueError(f"window w={w} needs at least {w + 1} steps, sequence has T={T}")
    return np.stack([x[:, t - w:t + 1] for t in range(w, T)], axis=1)


# ------------------------------------------------------------------ container

def save_dataset(ds: Dataset, path) -> None:
    """Little-endian: magic, u32 (count, T, N, D, C), then per sequence a
    u32 label followed by its T*N*D float64 values."""
    T = ds.T if len(ds) else 0
    parts = [MAGIC, struct.pack("<5I", len(ds), T, ds.N, ds.D, ds.num_classes)]
    for s in ds.sequences:
        if s.values.shape[0] != T:
            raise DimensionMismatch("container format needs equal-length sequences")
        parts.append(struct.pack("<I", s.label))
        parts.append(np.ascontiguousarray(s.values, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 25 or buf[:5] != MAGIC:
        raise MalformedHeader(f"{path}: not a dataset container (bad magic or short header)")
    count, T, N, D, C = struct.unpack_from("<5I", buf, 5)
    if C < 1 or (count and (T == 0 or N == 0 or D == 0)):
        raise MalformedHeader(f"{path}: invalid header fields count={count} T={T} N={N} D={D} C={C}")
    per = 4 + 8 * T * N * D
    body = len(buf) - 25
    if body != count * per:
        # a payload made of `count` whole records of another size means the
        # header dims are wrong; anything else is a cut-off file
        whole = count and body % count == 0 and (body // count - 4) % 8 == 0 and body // count > 4
        if whole or body > count * per:
            raise DimensionMismatch(f"{path}: payload of {body} bytes does not match header "
                                    f"(count={count}, T={T}, N={N}, D={D})")
        raise TruncatedPayload(f"{path}: truncated payload ({body} bytes, header promises {count * per})")
    seqs = []
    pos = 25
    for _ in range(count):
        (label,) = struct.unpack_from("<I", buf, pos)
        if label >= C:
            raise MalformedHeader(f"{path}: label {label} outside [0, {C})")
        vals = np.frombuffer(buf, dtype="<f8", count=T * N * D, offset=pos + 4)
        seqs.append(RawSequence(vals.reshape(T, N, D).astype(np.float64), int(label)))
        pos += per
    return Dataset(seqs, C, N, D)
