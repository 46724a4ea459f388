"""Global prompt pools, class-wise local prefix pools, key queries and accounting."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels as K
from . import tensor as T
from .tensor import DegenerateKeyError, Tensor

INIT_BOUND = 0.03
GLOBAL_MAGIC = "FEDMGP-POOL-GLOBAL"
LOCAL_MAGIC = "FEDMGP-POOL-LOCAL"


class NoLocalKnowledgeError(LookupError):
    pass


class PoolShapeError(ValueError):
    pass


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateKeyError("zero-norm key in cosine distance")
    return float(1.0 - (u @ v) / (nu * nv))


@dataclass
class QueryResult:
    indices: list[int]
    distances: list[float]


def _rank(dist_row: np.ndarray, labels: Sequence[int], n: int) -> QueryResult:
    # stable sort on distance, so equal distances keep ascending label order
    order = np.argsort(dist_row, kind="stable")[:n]
    return QueryResult([int(labels[i]) for i in order], [float(dist_row[i]) for i in order])


def distance_matrix(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    if np.any(~queries.any(axis=1)) or np.any(~keys.any(axis=1)):
        raise DegenerateKeyError("zero-norm vector among query keys")
    return K.cosine_distance_matrix(queries, keys)


# ------------------------------------------------------------ global pool

@dataclass
class GlobalPromptPool:
    keys: list[Tensor]
    prompts: list[Tensor]

    def __post_init__(self):
        if len(self.keys) != len(self.prompts) or not self.keys:
            raise PoolShapeError("pool needs M >= 1 matching keys and prompts")
        d = self.keys[0].shape[0]
        l = self.prompts[0].shape[0]
        for k, p in zip(self.keys, self.prompts):
            if k.shape != (d,) or p.shape != (l, d):
                raise PoolShapeError(f"entry shapes {k.shape}/{p.shape}, expected ({d},)/({l}, {d})")

    @classmethod
    def initialize(cls, size: int, length: int, dim: int, seed: int) -> "GlobalPromptPool":
        rng = np.random.default_rng([seed, 0x6770])
        keys = rng.uniform(-INIT_BOUND, INIT_BOUND, size=(size, dim))
        prompts = rng.uniform(-INIT_BOUND, INIT_BOUND, size=(size, length, dim))
        return cls([Tensor(k, requires_grad=True) for k in keys],
                   [Tensor(p, requires_grad=True) for p in prompts])

    @property
    def M(self) -> int:
        return len(self.keys)

    @property
    def L(self) -> int:
        return self.prompts[0].shape[0]

    @property
    def D(self) -> int:
        return self.keys[0].shape[0]

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.tensors())

    def tensors(self) -> list[Tensor]:
        return self.keys + self.prompts

    def key_matrix(self) -> np.ndarray:
        return np.stack([k.data for k in self.keys])

    def prompt_array(self) -> np.ndarray:
        return np.stack([p.data for p in self.prompts])

    def freeze(self) -> None:
        for t in self.tensors():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self) -> None:
        for t in self.tensors():
            t.requires_grad = True

    def checksum(self) -> str:
        return T.checksum(self.tensors())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self) -> "GlobalPromptPool":
        pool = GlobalPromptPool([Tensor(k.data.copy()) for k in self.keys],
                                [Tensor(p.data.copy()) for p in self.prompts])
        for t, src in zip(pool.tensors(), self.tensors()):
            t.requires_grad = src.requires_grad
        return pool

    def load_from(self, other: "GlobalPromptPool") -> None:
        """Overwrite values in place, keeping tensor identity (and optimizer slots)."""
        if (other.M, other.L, other.D) != (self.M, self.L, self.D):
            raise PoolShapeError(f"cannot load pool {(other.M, other.L, other.D)} into {(self.M, self.L, self.D)}")
        for dst, src in zip(self.tensors(), other.tensors()):
            dst.data[...] = src.data

    def shape(self) -> tuple[int, int, int]:
        return self.M, self.L, self.D

    # wire format -----------------------------------------------------------
    def to_bytes(self) -> bytes:
        header = f"{GLOBAL_MAGIC} M={self.M} L={self.L} D={self.D}\n".encode("ascii")
        body = np.concatenate([self.key_matrix().reshape(-1), self.prompt_array().reshape(-1)])
        return header + body.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "GlobalPromptPool":
        head, _, body = raw.partition(b"\n")
        parts = head.decode("ascii").split()
        if parts[0] != GLOBAL_MAGIC:
            raise ValueError(f"not a global pool payload: {parts[0]!r}")
        f = dict(p.split("=") for p in parts[1:])
        m, l, d = int(f["M"]), int(f["L"]), int(f["D"])
        vals = np.frombuffer(body, dtype="<f8")
        if vals.size != m * d + m * l * d:
            raise ValueError(f"payload holds {vals.size} floats, expected {m * d + m * l * d}")
        keys = vals[:m * d].reshape(m, d)
        prompts = vals[m * d:].reshape(m, l, d)
        return cls([Tensor(k.copy()) for k in keys], [Tensor(p.copy()) for p in prompts])


def query_global(pool: GlobalPromptPool, input_key, n: int) -> QueryResult:
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    dist = distance_matrix(np.asarray(input_key), pool.key_matrix())[0]
    return _rank(dist, range(pool.M), min(n, pool.M))


def select_global(pool: GlobalPromptPool, input_keys: np.ndarray, n: int) -> np.ndarray:
    """Batched top-N: (B, D) query keys -> (B, N) pool indices, ties to lower index."""
    dist = distance_matrix(input_keys, pool.key_matrix())
    return np.argsort(dist, axis=1, kind="stable")[:, :min(n, pool.M)]


def prepend(prompts: Sequence, E) -> Tensor:
    """Concatenate prompt blocks in front of the token matrix along the token axis."""
    E = T.as_tensor(E)
    if not prompts:
        return E
    blocks = [T.as_tensor(p) for p in prompts]
    for b in blocks:
        if b.shape[-1] != E.shape[-1]:
            raise PoolShapeError(f"prompt width {b.shape[-1]} vs token width {E.shape[-1]}")
    return T.concat(blocks + [E], axis=-2)


def gather_prompts(pool: GlobalPromptPool, selection: np.ndarray) -> Tensor:
    """(B, N) selection -> (B, N*L, D) prompt tokens, differentiable w.r.t. the selected prompts only."""
    uniq, inv = np.unique(selection, return_inverse=True)
    stacked = T.stack([pool.prompts[i] for i in uniq])
    b, n = selection.shape
    g = T.take(stacked, inv.reshape(b, n))
    return T.reshape(g, (b, n * pool.L, pool.D))


def gather_keys(keys: Sequence[Tensor], selection: np.ndarray) -> tuple[Tensor, np.ndarray]:
    uniq, inv = np.unique(selection, return_inverse=True)
    stacked = T.stack([keys[i] for i in uniq])
    return T.take(stacked, inv.reshape(selection.shape)), uniq


def build_prompted(pool: GlobalPromptPool | None, E: Tensor, selection: np.ndarray | None) -> tuple[Tensor, int]:
    """E' = [selected prompts; E] for a batch; returns the tokens and the class-token index."""
    if pool is None or selection is None or selection.shape[1] == 0:
        return E, 0
    p = gather_prompts(pool, selection)
    return T.concat([p, E], axis=1), p.shape[1]


# ------------------------------------------------------------- local pool

@dataclass
class LocalEntry:
    key: Tensor
    prefixes: dict[int, tuple[Tensor, Tensor]]

    def tensors(self) -> list[Tensor]:
        out = [self.key]
        for b in sorted(self.prefixes):
            out.extend(self.prefixes[b])
        return out


@dataclass
class LocalPromptPool:
    dim: int
    prefix_length: int = 5
    attached_blocks: tuple[int, ...] = (0, 1)
    seed: int = 0
    entries: dict[int, LocalEntry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def classes(self) -> list[int]:
        return sorted(self.entries)

    def new_entry(self, label: int) -> LocalEntry:
        rng = np.random.default_rng([self.seed, 0x6C70, int(label)])
        key = Tensor(rng.uniform(-INIT_BOUND, INIT_BOUND, self.dim), requires_grad=True)
        shape = (self.prefix_length, self.dim)
        prefixes = {}
        for b in self.attached_blocks:
            pk = rng.uniform(-INIT_BOUND, INIT_BOUND, shape)
            pv = rng.uniform(-INIT_BOUND, INIT_BOUND, shape)
            prefixes[b] = (Tensor(pk, requires_grad=True), Tensor(pv, requires_grad=True))
        return LocalEntry(key, prefixes)

    def tensors(self) -> list[Tensor]:
        out = []
        for c in self.classes:
            out.extend(self.entries[c].tensors())
        return out

    def checksum(self) -> str:
        return T.checksum(self.tensors())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors())

    def key_matrix(self) -> np.ndarray:
        return np.stack([self.entries[c].key.data for c in self.classes])

    def to_bytes(self) -> bytes:
        cls = ",".join(str(c) for c in self.classes)
        blocks = ",".join(str(b) for b in self.attached_blocks)
        header = (f"{LOCAL_MAGIC} D={self.dim} lp={self.prefix_length} "
                  f"blocks={blocks} classes={cls}\n").encode("ascii")
        parts = [e.key.data for e in (self.entries[c] for c in self.classes)]
        for c in self.classes:
            for b in self.attached_blocks:
                pk, pv = self.entries[c].prefixes[b]
                parts += [pk.data.reshape(-1), pv.data.reshape(-1)]
        body = np.concatenate(parts) if parts else np.zeros(0)
        return header + body.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, seed: int = 0) -> "LocalPromptPool":
        head, _, body = raw.partition(b"\n")
        parts = head.decode("ascii").split()
        if parts[0] != LOCAL_MAGIC:
            raise ValueError(f"not a local pool payload: {parts[0]!r}")
        f = dict(p.split("=", 1) for p in parts[1:])
        d, lp = int(f["D"]), int(f["lp"])
        blocks = tuple(int(b) for b in f["blocks"].split(",") if b)
        classes = [int(c) for c in f["classes"].split(",") if c]
        vals = np.frombuffer(body, dtype="<f8")
        pool = cls(d, lp, blocks, seed)
        off = 0
        keys = {}
        for c in classes:
            keys[c] = vals[off:off + d].copy()
            off += d
        for c in classes:
            prefixes = {}
            for b in blocks:
                pk = vals[off:off + lp * d].reshape(lp, d).copy()
                off += lp * d
                pv = vals[off:off + lp * d].reshape(lp, d).copy()
                off += lp * d
                prefixes[b] = (Tensor(pk, requires_grad=True), Tensor(pv, requires_grad=True))
            pool.entries[c] = LocalEntry(Tensor(keys[c], requires_grad=True), prefixes)
        if off != vals.size:
            raise ValueError(f"local pool payload has {vals.size - off} stray floats")
        return pool


def select_by_mask(pool: LocalPromptPool, label: int) -> LocalEntry:
    label = int(label)
    entry = pool.entries.get(label)
    if entry is None:
        entry = pool.entries[label] = pool.new_entry(label)
    return entry


def query_local(pool: LocalPromptPool, prompted_key, n: int = 1) -> QueryResult:
    if not pool.entries:
        raise NoLocalKnowledgeError("local prompt pool is empty")
    dist = distance_matrix(np.asarray(prompted_key), pool.key_matrix())[0]
    return _rank(dist, pool.classes, min(n, len(pool)))


def select_local(pool: LocalPromptPool, prompted_keys: np.ndarray) -> np.ndarray:
    """Batched top-1 class id per row of (B, D) prompted keys."""
    if not pool.entries:
        raise NoLocalKnowledgeError("local prompt pool is empty")
    dist = distance_matrix(prompted_keys, pool.key_matrix())
    return np.asarray(pool.classes)[np.argmin(dist, axis=1)]


def gather_prefixes(pool: LocalPromptPool, labels: Iterable[int]) -> dict[int, tuple[Tensor, Tensor]]:
    """Per-sample prefixes for a batch: {block: ((B, lp, D) p_K, (B, lp, D) p_V)}."""
    labels = np.asarray(list(labels), dtype=np.int64)
    uniq, inv = np.unique(labels, return_inverse=True)
    out = {}
    for b in pool.attached_blocks:
        pk = T.stack([pool.entries[int(c)].prefixes[b][0] for c in uniq])
        pv = T.stack([pool.entries[int(c)].prefixes[b][1] for c in uniq])
        out[b] = (T.take(pk, inv), T.take(pv, inv))
    return out


# --------------------------------------------------------------- accounting

@dataclass(frozen=True)
class ParamCount:
    global_prompts: int
    global_keys: int
    local_prompts: int
    local_keys: int

    @property
    def transmitted(self) -> int:
        return self.global_prompts + self.global_keys

    @property
    def trainable(self) -> int:
        return self.global_prompts + self.global_keys + self.local_prompts + self.local_keys


def pool_param_count(M: int, L: int, D: int, C: int, prefix_length: int,
                     attached_blocks, local_key_count: int | None = None) -> ParamCount:
    """Parameter accounting for both pools.

    ``attached_blocks`` may be a block-index collection or a block count.
    ``local_key_count`` defaults to ``C`` (one key per class entry).
    """
    n_blocks = attached_blocks if isinstance(attached_blocks, int) else len(tuple(attached_blocks))
    keys = C if local_key_count is None else local_key_count
    return ParamCount(
        global_prompts=M * L * D,
        global_keys=M * D,
        local_prompts=C * n_blocks * 2 * prefix_length * D,
        local_keys=keys * D,
    )
