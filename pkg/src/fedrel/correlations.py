"""Static node-correlation adjacencies (K-NN, PCC, PLV).

These stand in for the learned intra adjacency in the "intra only"
ablation; pass their output as ``adjacency=`` to :func:`fedrel.diig.forward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("knn", "pcc", "plv", "dynamic-spatial", "dynamic-temporal")


@dataclass(frozen=True)
class Adjacency:
    matrix: np.ndarray
    kind: str

    def __post_init__(self):
        m = self.matrix
        if self.kind not in KINDS:
            raise ValueError(f"unknown adjacency kind {self.kind!r}")
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"adjacency must be square, got {m.shape}")
        if (m < 0).any():
            raise ValueError("adjacency entries must be non-negative")

    def row_normalised(self) -> np.ndarray:
        s = self.matrix.sum(axis=1, keepdims=True)
        return np.divide(self.matrix, s, out=np.zeros_like(self.matrix), where=s > 0)


def knn_adjacency(x: np.ndarray, k: int) -> Adjacency:
    """Binary directed graph: row ``i`` marks the ``k`` nearest other nodes.

    Distances are Euclidean over feature rows; ties go to the lower index.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < N={n}, got {k}")
    dist = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    a = np.zeros((n, n))
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        # lexsort: last key is primary, so distance first then index
        order = np.lexsort((others, dist[i, others]))
        a[i, others[order[:k]]] = 1.0
    return Adjacency(a, "knn")


def pcc_adjacency(x: np.ndarray) -> Adjacency:
    """Absolute Pearson correlation between feature rows."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((xc * xc).sum(axis=1))
    for i, v in enumerate(norms):
        if v == 0.0:
            raise ValueError(f"row {i} has zero variance; Pearson correlation undefined")
    r = (xc @ xc.T) / np.outer(norms, norms)
    a = np.clip(np.abs(r), 0.0, 1.0)
    np.fill_diagonal(a, 1.0)
    return Adjacency(a, "pcc")


def analytic_signal(s: np.ndarray) -> np.ndarray:
    """Analytic signal of each row via a direct O(D^2) DFT."""
    s = np.asarray(s, dtype=np.float64)
    D = s.shape[-1]
    k = np.arange(D)
    basis = np.exp(-2j * np.pi * np.outer(k, k) / D)
    spec = s @ basis.T
    h = np.zeros(D)
    h[0] = 1.0
    if D % 2 == 0:
        h[D // 2] = 1.0
        h[1:D // 2] = 2.0
    else:
        h[1:(D + 1) // 2] = 2.0
    return (spec * h) @ basis.conj().T / D


def plv_adjacency(s: np.ndarray) -> Adjacency:
    """Phase locking value between raw signal rows ``(N, D)``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] < 4:
        raise ValueError(f"PLV needs at least 4 samples per signal, got {s.shape[-1]}")
    for i, row in enumerate(s):
        if np.ptp(row) == 0.0:
            raise ValueError(f"row {i} is constant; instantaneous phase undefined")
    phase = np.angle(analytic_signal(s))
    phasor = np.exp(1j * phase)
    a = np.abs(phasor @ phasor.conj().T) / s.shape[-1]
    a = np.clip(a, 0.0, 1.0)
    np.fill_diagonal(a, 1.0)
    return Adjacency(a, "plv")


def static_window_adjacency(windows_raw: np.ndarray, windows_feat: np.ndarray, kind: str,
                            k: int = 2) -> np.ndarray:
    """Row-normalised static adjacencies for every graph in a batch of windows.

    ``windows_raw`` is ``(..., N, D)`` raw signal (used by PLV) and
    ``windows_feat`` is ``(..., N, d)`` node features (K-NN and PCC).
    """
    src = windows_raw if kind == "plv" else windows_feat
    lead = src.shape[:-2]
    flat = src.reshape(-1, *src.shape[-2:])
    out = np.empty((len(flat), src.shape[-2], src.shape[-2]))
    for i, g in enumerate(flat):
        if kind == "knn":
            adj = knn_adjacency(g, k)
        elif kind == "pcc":
            adj = pcc_adjacency(g)
        elif kind == "plv":
            adj = plv_adjacency(g)
        else:
            raise ValueError(f"no static correlation named {kind!r}")
        out[i] = adj.row_normalised()
    return out.reshape(*lead, *out.shape[-2:])
