"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the tape that is active in the current thread
(``with Tape() as tape: ...``) whenever one of their inputs requires a
gradient. Outside a tape nothing is recorded, which is how frozen forward
passes (query keys, teacher outputs, inference) stay cheap.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as K

MASK_VALUE = -1e30


class ShapeError(ValueError):
    pass


class FrozenParameterError(RuntimeError):
    pass


class MissingGradientError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def checksum(self) -> str:
        return hashlib.sha256(self.data.tobytes()).hexdigest()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------- tape

@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    tapes = _stack()
    return tapes[-1] if tapes else None


@dataclass
class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, out: Tensor, inputs, backward, op: str) -> None:
        self.nodes.append(Node(out, tuple(inputs), backward, op))

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        return self.grads.get(id(t))

    def leaves(self) -> list[Tensor]:
        produced = {id(n.out) for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        self.grads = grads
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _make(data, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def gelu(x: Tensor) -> Tensor:
    y, t = K.gelu(x.data)
    return _make(y, (x,), lambda g: (K.gelu_backward(x.data, t, np.ascontiguousarray(g)),), "gelu")


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g)
            elif b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ------------------------------------------------------------ normalization

def _last_axis_rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    xm = np.moveaxis(x.data, axis, -1)
    y = K.softmax_rows(_last_axis_rows(xm)).reshape(xm.shape)

    def bw(g):
        gm = np.moveaxis(g, axis, -1)
        d = K.softmax_rows_backward(_last_axis_rows(y), _last_axis_rows(gm)).reshape(xm.shape)
        return (np.moveaxis(d, -1, axis),)

    return _make(np.moveaxis(y, -1, axis), (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} vs width {d}")
    y, xhat, rstd = K.layernorm_rows(_last_axis_rows(x.data), gamma.data, beta.data, eps)

    def bw(g):
        dx, dg, db = K.layernorm_rows_backward(_last_axis_rows(g), xhat, rstd, gamma.data)
        return dx.reshape(x.shape), dg, db

    return _make(y.reshape(x.shape), (x, gamma, beta), bw, "layer_norm")


# ------------------------------------------------------------------- shapes

def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat shape mismatch: {[u.shape for u in tensors]} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=ax)), "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    return _make(np.stack([t.data for t in tensors]), tensors,
                 lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


def take(x: Tensor, index) -> Tensor:
    """Gather along axis 0 with an integer index array of any shape."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (full,)

    return _make(x.data[index], (x,), bw, "take")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (_unbroadcast(g, x.shape),), "broadcast")


# --------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis), 1.0 / n)


# ------------------------------------------------------------------- losses

def mask_logits(logits: Tensor, allowed) -> Tensor:
    """Replace logits of disallowed classes by a huge negative constant."""
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != logits.shape[-1:]:
        raise ShapeError(f"mask of shape {allowed.shape} vs logits {logits.shape}")
    out = np.where(allowed, logits.data, MASK_VALUE)
    return _make(out, (logits,), lambda g: (g * allowed,), "mask")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy. ``logits`` is (C,) with an int label or (B, C)."""
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    c = z.shape[1]
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"label out of range for {c} classes: {labels.tolist()}")
    p = K.softmax_rows(np.ascontiguousarray(z))
    rows = np.arange(z.shape[0])
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    losses = lse - z[rows, labels]
    val = np.maximum(losses, 0.0).mean()
    if not np.isfinite(val):
        raise NonFiniteError(f"non-finite cross-entropy {val}")

    def bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        d *= g / z.shape[0]
        return (d[0] if single else d,)

    return _make(np.asarray(val), (logits,), bw, "cross_entropy")


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _make(np.asarray((diff * diff).sum() / n), (a, b), bw, "mse")


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise ``1 - cos(a, b)`` over the last axis (broadcasting leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine distance width mismatch: {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(-1, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateKeyError("zero-norm vector in cosine distance")
    ua, ub = a.data / na, b.data / nb
    cos = (ua * ub).sum(-1, keepdims=True)

    def bw(g):
        g = g[..., None]
        ga = -g * (ub - cos * ua) / na
        gb = -g * (ua - cos * ub) / nb
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(1.0 - cos[..., 0], (a, b), bw, "cosine_distance")


class DegenerateKeyError(ValueError):
    pass


# ---------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)
    refs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        # lr == 0 is allowed as an explicit null step
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")

    def slots(self, p: Tensor) -> tuple[np.ndarray, np.ndarray]:
        key = id(p)
        if key not in self.m:
            self.refs[key] = p  # pin the object so its id stays unique
            self.m[key] = np.zeros_like(p.data)
            self.v[key] = np.zeros_like(p.data)
            self.t[key] = 0
        return self.m[key], self.v[key]


def adam_step(params: Iterable[Tensor], state: AdamState) -> None:
    """One Adam update on ``params``; each parameter's gradient is cleared after."""
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise FrozenParameterError(f"optimizer step on frozen tensor {p!r}")
        if p.grad is None:
            raise MissingGradientError(f"no gradient for {p!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for p in params:
        m, v = state.slots(p)
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        state.t[id(p)] += 1
        t = state.t[id(p)]
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        p.grad = None


def checksum(tensors: Iterable[Tensor]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(str(t.shape).encode())
        h.update(t.data.tobytes())
    return h.hexdigest()
