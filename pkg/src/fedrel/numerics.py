"""Dense tensor algebra with a recording tape for reverse-mode gradients.

Everything is float64 numpy.  Operations take and return :class:`Tensor`
objects; while a :class:`Tape` is active (``with Tape() as tape:``) every
operation is appended to it so that :func:`backward` can walk it in reverse.
The active tape is thread-local, so separate participants can train on
separate threads without interfering.

Operations accept batched arrays: the trailing axes carry the matrix
semantics and any leading axes are treated as a batch.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "Tape", "ParamSet", "OptState", "NumericError",
    "as_tensor", "identity", "matmul", "add", "sub", "mul", "scale", "neg",
    "sigmoid", "exp", "log", "square", "softmax_row", "layer_norm",
    "sum_all", "mean", "concat", "reshape", "swap_last", "expand", "take",
    "backward", "adam_step", "xavier_init", "xavier_bound", "dense",
    "numeric_grad", "relative_error",
]


class NumericError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "name", "trainable", "requires_grad")

    def __init__(self, data, name: str | None = None, trainable: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def identity(n: int) -> Tensor:
    return Tensor(np.eye(n))


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable
    backward: Callable


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so the list is already in
    topological order.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self._prev = None

    def leaf(self, data, name: str | None = None, trainable: bool = True) -> Tensor:
        t = Tensor(data, name=name, trainable=trainable)
        self.leaves.append(t)
        return t

    def __enter__(self) -> "Tape":
        self._prev = getattr(Tape._local, "active", None)
        Tape._local.active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._local.active = self._prev
        self._prev = None

    @staticmethod
    def active() -> "Tape | None":
        return getattr(Tape._local, "active", None)

    def replay(self) -> bool:
        """Re-run every recorded forward and compare outputs bitwise."""
        for node in self.nodes:
            out = node.forward(*(t.data for t in node.inputs))
            if out.shape != node.output.data.shape or not np.array_equal(out, node.output.data):
                return False
        return True


def _record(op: str, fwd: Callable, bwd: Callable, inputs: Sequence[Tensor]) -> Tensor:
    out_data = fwd(*(t.data for t in inputs))
    # any NaN/Inf entry makes the sum non-finite
    if not np.isfinite(out_data.sum()):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor(out_data)
    tape = Tape.active()
    if tape is not None:
        out.requires_grad = any(t.requires_grad for t in inputs)
        tape.nodes.append(_Node(op, tuple(inputs), out, fwd, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # weight matrix: fold the batch axes into one GEMM
        k, m = b.shape

        def fwd(x, y):
            return (x.reshape(-1, k) @ y).reshape(*x.shape[:-1], m)

        def bwd(g, x, y, out):
            g2 = g.reshape(-1, m)
            return (g2 @ y.T).reshape(x.shape), x.reshape(-1, k).T @ g2

        return _record("matmul", fwd, bwd, (a, b))

    def bwd(g, x, y, out):
        return (_unbroadcast(g @ _swap(y), x.shape), _unbroadcast(_swap(x) @ g, y.shape))

    return _record("matmul", np.matmul, bwd, (a, b))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g, x, y, out):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _record("add", np.add, bwd, (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g, x, y, out):
        return _unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)

    return _record("sub", np.subtract, bwd, (a, b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g, x, y, out):
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return _record("mul", np.multiply, bwd, (a, b))


def scale(a, c: float) -> Tensor:
    c = float(c)

    def fwd(x):
        return x * c

    def bwd(g, x, out):
        return (g * c,)

    return _record("scale", fwd, bwd, (as_tensor(a),))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def sigmoid(a) -> Tensor:
    def bwd(g, x, out):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", expit, bwd, (as_tensor(a),))


def exp(a) -> Tensor:
    def bwd(g, x, out):
        return (g * out,)

    return _record("exp", np.exp, bwd, (as_tensor(a),))


def log(a, floor: float = 0.0) -> Tensor:
    """Natural log; with ``floor > 0`` inputs are clamped from below first."""

    def fwd(x):
        return np.log(np.maximum(x, floor)) if floor > 0 else np.log(x)

    def bwd(g, x, out):
        if floor > 0:
            return (np.where(x > floor, g / np.maximum(x, floor), 0.0),)
        return (g / x,)

    return _record("log", fwd, bwd, (as_tensor(a),))


def square(a) -> Tensor:
    def bwd(g, x, out):
        return (2.0 * g * x,)

    return _record("square", np.square, bwd, (as_tensor(a),))


def softmax_row(a) -> Tensor:
    """Softmax along the last axis, with max subtraction."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0 or a.data.size == 0:
        raise ValueError("softmax_row: degenerate shape")

    def fwd(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def bwd(g, x, out):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax_row", fwd, bwd, (a,))


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit population variance.

    ``gamma`` and ``beta`` are the optional affine scale and shift; leaving
    them out is the identity affine.
    """
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] < 2:
        raise ValueError(f"layer_norm needs at least 2 features, got shape {a.shape}")

    def fwd(x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + eps)

    def bwd(g, x, out):
        n = x.shape[-1]
        xc = x - x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    out = _record("layer_norm", fwd, bwd, (a,))
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def sum_all(a) -> Tensor:
    def fwd(x):
        return np.asarray(x.sum())

    def bwd(g, x, out):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum_all", fwd, bwd, (as_tensor(a),))


def mean(a, axis: int | None = None) -> Tensor:
    """Mean over one axis (dropped), or over everything when ``axis`` is None."""
    a = as_tensor(a)
    if axis is None:
        n = a.data.size

        def fwd(x):
            return np.asarray(x.mean())

        def bwd(g, x, out):
            return (np.full(x.shape, float(g) / n),)

        return _record("mean", fwd, bwd, (a,))

    ax = axis % a.ndim
    n = a.shape[ax]

    def fwd(x):
        return x.mean(axis=ax)

    def bwd(g, x, out):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape).copy(),)

    return _record("mean", fwd, bwd, (a,))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    ax = axis % parts[0].ndim
    splits = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def fwd(*xs):
        return np.concatenate(xs, axis=ax)

    bounds = list(zip([0, *splits], [*splits, None]))
    lead = (slice(None),) * ax

    def bwd(g, *args):
        return tuple(g[lead + (slice(lo, hi),)] for lo, hi in bounds)

    return _record("concat", fwd, bwd, parts)


def reshape(a, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def fwd(x):
        return x.reshape(shape)

    def bwd(g, x, out):
        return (g.reshape(x.shape),)

    return _record("reshape", fwd, bwd, (as_tensor(a),))


def swap_last(a) -> Tensor:
    def bwd(g, x, out):
        return (_swap(g),)

    return _record("swap_last", _swap, bwd, (as_tensor(a),))


def expand(a, shape: Sequence[int]) -> Tensor:
    """Broadcast to ``shape`` (numpy rules); gradient sums back."""
    shape = tuple(shape)

    def fwd(x):
        return np.broadcast_to(x, shape).copy()

    def bwd(g, x, out):
        return (_unbroadcast(g, x.shape),)

    return _record("expand", fwd, bwd, (as_tensor(a),))


def take(a, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    a = as_tensor(a)
    ax = axis % a.ndim

    def fwd(x):
        return np.take(x, index, axis=ax)

    def bwd(g, x, out):
        full = np.zeros(x.shape)
        sl = [slice(None)] * x.ndim
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return _record("take", fwd, bwd, (a,))


# ------------------------------------------------------------------ backward

def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable leaf on ``tape``.

    Leaves that do not influence the loss get exact zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        datas = [t.data for t in node.inputs]
        in_grads = node.backward(g, *datas, node.output.data)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for leaf in tape.leaves:
        if leaf.trainable:
            g = grads.get(id(leaf))
            out[leaf.name] = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
    return out


# -------------------------------------------------------- parameter storage

class ParamSet:
    """Named tensors backed by one contiguous float64 vector.

    ``ps[name]`` returns a writable view into ``ps.flat``; name order is the
    insertion order and is stable, which is what aggregation relies on.
    """

    def __init__(self, shapes: Mapping[str, Sequence[int]], flat: np.ndarray | None = None):
        self.shapes = {k: tuple(int(n) for n in v) for k, v in shapes.items()}
        self.offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for k, shp in self.shapes.items():
            size = math.prod(shp)
            self.offsets[k] = (pos, pos + size)
            pos += size
        if flat is None:
            flat = np.zeros(pos)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (pos,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({pos},)")
        self.flat = flat

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamSet":
        ps = cls({k: np.shape(v) for k, v in arrays.items()})
        for k, v in arrays.items():
            ps[k] = v
        return ps

    @property
    def names(self) -> list[str]:
        return list(self.shapes)

    @property
    def size(self) -> int:
        return self.flat.size

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi = self.offsets[name]
        return self.flat[lo:hi].reshape(self.shapes[name])

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.shapes[name]:
            raise ValueError(f"{name}: shape {value.shape} != {self.shapes[name]}")
        lo, hi = self.offsets[name]
        self.flat[lo:hi] = value.ravel()

    def __contains__(self, name: str) -> bool:
        return name in self.shapes

    def __iter__(self):
        return iter(self.shapes)

    def __len__(self) -> int:
        return len(self.shapes)

    def items(self):
        return ((k, self[k]) for k in self.shapes)

    def copy(self) -> "ParamSet":
        return ParamSet(self.shapes, self.flat.copy())

    def like(self, flat: np.ndarray) -> "ParamSet":
        return ParamSet(self.shapes, flat)

    def to_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.items()}

    def flatten(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        """Pack a name-keyed mapping (e.g. gradients) in this set's layout."""
        missing = set(self.shapes) - set(arrays)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)}")
        out = np.empty(self.size)
        for k, (lo, hi) in self.offsets.items():
            a = np.asarray(arrays[k])
            if a.shape != self.shapes[k]:
                raise ValueError(f"{k}: shape {a.shape} != {self.shapes[k]}")
            out[lo:hi] = a.ravel()
        return out

    def leaves(self, tape: Tape, trainable: bool = True, prefix: str = "") -> dict[str, Tensor]:
        return {k: tape.leaf(v, name=prefix + k, trainable=trainable) for k, v in self.items()}

    def same_layout(self, other: "ParamSet") -> bool:
        return self.shapes == other.shapes


# ----------------------------------------------------------------- optimizer

@dataclass
class OptState:
    lr: float = 1.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def copy(self) -> "OptState":
        return OptState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                        None if self.m is None else self.m.copy(),
                        None if self.v is None else self.v.copy())


def adam_step(params: ParamSet, grads, state: OptState) -> ParamSet:
    """One bias-corrected Adam update, applied in place; returns ``params``.

    ``grads`` is either a name-keyed mapping or a flat vector in the
    parameter layout.
    """
    g = grads if isinstance(grads, np.ndarray) and grads.ndim == 1 else None
    if g is None:
        if isinstance(grads, ParamSet):
            if not grads.same_layout(params):
                raise ValueError("gradient layout does not match parameters")
            g = grads.flat
        else:
            g = params.flatten(grads)
    if g.shape != params.flat.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {params.flat.shape}")
    if state.m is None:
        state.m = np.zeros_like(params.flat)
        state.v = np.zeros_like(params.flat)
    elif state.m.shape != params.flat.shape:
        raise ValueError("optimizer moments do not match parameter shape")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    params.flat -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ------------------------------------------------------------ initialisation

def xavier_bound(shape: Sequence[int]) -> float:
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 1:
        fan_in, fan_out = 1, shape[0]
    else:
        raise ValueError(f"xavier_init supports rank 1 or 2, got shape {tuple(shape)}")
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"zero-sized dimension in shape {tuple(shape)}")
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape: Sequence[int], rng_seed) -> np.ndarray:
    """Glorot-uniform sample; a rank-1 shape is treated as a 1 x n matrix.

    ``rng_seed`` is an int seed or an existing ``np.random.Generator``.
    """
    bound = xavier_bound(shape)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return rng.uniform(-bound, bound, size=tuple(shape))


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` with respect to ``arr`` (mutated and restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + step
        fp = f()
        arr[idx] = orig - step
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a| + |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))
