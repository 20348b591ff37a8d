"""Finite-difference checks for every differentiable primitive and the full model.

Each case builds a scalar ``sum(op(inputs) * R)`` with a fixed random
projection ``R``, takes the tape gradient, and compares it with central
differences of the same function evaluated without a tape.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import diig
from . import numerics as nx
from . import relevance as rel
from .numerics import Tape, Tensor

TOLERANCE = 1e-4


def check_function(build: Callable[..., Tensor], inputs: list[np.ndarray], seed: int = 0,
                   step: float = 1e-5) -> float:
    """Max relative error over all inputs of ``build(*tensors)``."""
    rng = np.random.default_rng(seed)
    probe = None

    def value() -> float:
        out = build(*(Tensor(a) for a in inputs)).data
        return float(np.sum(out * probe))

    with Tape() as tape:
        leaves = [tape.leaf(a, name=f"in{i}") for i, a in enumerate(inputs)]
        out = build(*leaves)
        probe = rng.standard_normal(out.shape)
        loss = nx.sum_all(nx.mul(out, probe))
    grads = nx.backward(tape, loss)
    return max(nx.relative_error(grads[f"in{i}"], nx.numeric_grad(value, a, step))
               for i, a in enumerate(inputs))


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    r = rng.standard_normal
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    return {
        "matmul": (nx.matmul, [r((2, 3, 4)), r((2, 4, 5))]),
        "matmul_shared_weight": (nx.matmul, [r((2, 3, 4)), r((4, 5))]),
        "add_broadcast": (nx.add, [r((3, 4)), r((4,))]),
        "sub": (nx.sub, [r((3, 4)), r((3, 4))]),
        "mul": (nx.mul, [r((3, 4)), r((3, 4))]),
        "scale": (lambda a: nx.scale(a, -1.7), [r((3, 4))]),
        "neg": (nx.neg, [r((3, 4))]),
        "sigmoid": (nx.sigmoid, [r((3, 4))]),
        "exp": (nx.exp, [r((3, 4))]),
        "log": (nx.log, [pos(3, 4)]),
        "square": (nx.square, [r((3, 4))]),
        "softmax_row": (nx.softmax_row, [r((2, 3, 5))]),
        "layer_norm": (lambda a, g, b: nx.layer_norm(a, g, b), [r((2, 3, 6)), r((6,)), r((6,))]),
        "sum_all": (nx.sum_all, [r((3, 4))]),
        "mean_axis": (lambda a: nx.mean(a, axis=-2), [r((2, 3, 4))]),
        "mean_all": (nx.mean, [r((3, 4))]),
        "concat": (lambda a, b: nx.concat([a, b], axis=-1), [r((2, 3)), r((2, 4))]),
        "reshape": (lambda a: nx.reshape(a, (4, 3)), [r((3, 4))]),
        "swap_last": (nx.swap_last, [r((2, 3, 4))]),
        "expand": (lambda a: nx.expand(a, (2, 3, 4)), [r((3, 1))]),
        "take": (lambda a: nx.take(a, 1, axis=-3), [r((2, 3, 4, 2))]),
        "intra_correlation": (diig.intra_correlation, [r((3, 4)), r((4, 4))]),
        "message_pass": (diig.message_pass, [rng.dirichlet(np.ones(3), size=3), r((3, 4)), r((8, 5)), r((5,))]),
        "inter_correlation": (diig.inter_correlation, [r((3, 4)), r((3, 4)), r((4, 4))]),
        "kl_divergence": (rel.kl_divergence, [r((3, 4)), r((3, 4))]),
        "mse": (rel.mse, [r((5,)), r((5,))]),
    }


def diig_check(seed: int = 0, N: int = 3, w: int = 2, C: int = 2, batch: int = 2) -> float:
    """Cross-entropy of the full DIIG forward pass against every parameter.

    Layer widths are narrowed so that differencing every entry stays cheap;
    every stage of the model is still exercised.
    """
    rng = np.random.default_rng(seed)
    cfg = diig.ModelConfig(d=5, node_emb=6, graph_emb=7, readout_hidden=(6, 8), w=w, C=C, dropout=0.0)
    params = diig.init_params(cfg, rng)
    # push biases and the layer-norm affine off their trivial init values
    params.flat += 0.1 * rng.standard_normal(params.size)
    x = rng.standard_normal((batch, w + 1, N, cfg.d))
    y = diig.one_hot(rng.integers(0, C, size=batch), C)

    def value() -> float:
        return float(diig.classification_loss(diig.forward(cfg, diig.as_constants(params), x).probs, y).data)

    _, grads = diig.loss_and_grads(cfg, params, x, y)
    return nx.relative_error(params.flatten(grads), nx.numeric_grad(value, params.flat))


def run_suite(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {name: check_function(fn, args, seed) for name, (fn, args) in primitive_cases(rng).items()}
    out["diig_forward"] = diig_check(seed)
    return out
