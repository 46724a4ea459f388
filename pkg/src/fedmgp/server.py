"""Server-side aggregation of global prompt pools and the per-round ledger."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as B
from . import prompts as P
from . import tensor as T
from .tensor import Tensor

TEACHER_SCHEDULES = ("summed", "round_robin")
INIT_MODES = ("mean", "first")


class RoundIncompleteError(RuntimeError):
    pass


class FusionInputError(ValueError):
    pass


@dataclass
class FusionConfig:
    distill_steps: int = 50
    distill_lr: float = 1e-3
    proxy_batch: int = 32
    teacher_schedule: str = "summed"
    init: str = "mean"
    key_nudge: float = 0.1
    top_n: int = 5
    seed: int = 42

    def __post_init__(self):
        if self.teacher_schedule not in TEACHER_SCHEDULES:
            raise ValueError(f"teacher_schedule must be one of {TEACHER_SCHEDULES}")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if self.distill_steps < 0 or self.distill_lr < 0 or self.key_nudge < 0:
            raise ValueError("distill_steps, distill_lr and key_nudge must be >= 0")
        if self.proxy_batch < 1:
            raise ValueError("proxy_batch must be >= 1")


@dataclass
class FusionResult:
    pool: P.GlobalPromptPool
    loss_trace: list[float]

    @property
    def initial_loss(self) -> float:
        return self.loss_trace[0]

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1]


def _check_pools(pools) -> None:
    if not pools:
        raise FusionInputError("no client pools to aggregate")
    shape = pools[0].shape()
    for i, p in enumerate(pools):
        if p.shape() != shape:
            raise FusionInputError(f"pool {i} has shape {p.shape()}, expected {shape}")


def _mean_arrays(arrays: list[np.ndarray]) -> np.ndarray:
    # anchored mean: identical inputs give back the first input bit for bit
    base = arrays[0]
    acc = np.zeros_like(base)
    for a in arrays[1:]:
        acc += a - base
    return base + acc / len(arrays)


def fedavg_pools(pools: list[P.GlobalPromptPool]) -> P.GlobalPromptPool:
    """Element-wise mean of index-aligned pools."""
    _check_pools(pools)
    keys = _mean_arrays([p.key_matrix() for p in pools])
    prompts = _mean_arrays([p.prompt_array() for p in pools])
    return P.GlobalPromptPool([Tensor(k.copy()) for k in keys], [Tensor(p.copy()) for p in prompts])


def _prompted_features(backbone, E: np.ndarray, keys: np.ndarray, pool, top_n: int, grad: bool):
    sel = P.select_global(pool, keys, top_n)
    tokens, cls = P.build_prompted(pool, Tensor(E), sel)
    f = B.features(backbone, tokens, cls_index=cls)
    return f if grad else f.data


def fusion_loss(student: P.GlobalPromptPool, backbone, E: np.ndarray, selection: np.ndarray,
                teacher_outputs: list[np.ndarray], teacher_keys: np.ndarray, key_nudge: float):
    """Summed MSE between the student's prompted features and each teacher's, plus the key nudge.

    Returns (student features, loss).
    """
    tokens, cls = P.build_prompted(student, Tensor(E), selection)
    out = B.features(backbone, tokens, cls_index=cls)
    loss = T.mse(out, Tensor(teacher_outputs[0]))
    for t in teacher_outputs[1:]:
        loss = loss + T.mse(out, Tensor(t))
    if key_nudge > 0:
        loss = loss + T.mul(T.mse(T.stack(student.keys), Tensor(teacher_keys)), key_nudge)
    return out, loss


def selective_prompt_fusion(pools: list[P.GlobalPromptPool], proxy_images: np.ndarray,
                            backbone: B.BackboneWeights, cfg: FusionConfig,
                            proxy_keys: np.ndarray | None = None) -> FusionResult:
    """Distil client pools into one student pool on the unlabeled proxy set.

    The student output on each proxy sample is matched (MSE) against every
    teacher's output; the trace records that summed loss, averaged over the
    proxy set, before the first step and after every step.
    """
    _check_pools(pools)
    proxy_images = np.asarray(proxy_images, dtype=np.float64)
    if len(proxy_images) == 0:
        raise FusionInputError("empty proxy set")
    if proxy_keys is None:
        proxy_keys = np.concatenate([
            B.features(backbone, B.embed(backbone, proxy_images[s:s + 128])).data
            for s in range(0, len(proxy_images), 128)])
    E = B.embed(backbone, proxy_images).data
    teachers = [_prompted_features(backbone, E, proxy_keys, p, cfg.top_n, False) for p in pools]
    teacher_keys = np.mean([p.key_matrix() for p in pools], axis=0)

    student = fedavg_pools(pools) if cfg.init == "mean" else pools[0].copy()
    student.unfreeze()
    opt = T.AdamState(learning_rate=cfg.distill_lr)
    rng = np.random.default_rng([cfg.seed, 0x5F])
    k = len(pools)

    def full_loss() -> float:
        out = _prompted_features(backbone, E, proxy_keys, student, cfg.top_n, False)
        return float(sum(((out - t) ** 2).mean() for t in teachers))

    n = len(proxy_images)
    whole = cfg.proxy_batch >= n
    # when a batch is the whole proxy set the step's own forward is the pre-update loss
    trace = [] if whole else [full_loss()]
    for step in range(cfg.distill_steps):
        idx = np.arange(n) if whole else rng.choice(n, size=cfg.proxy_batch, replace=False)
        sel = P.select_global(student, proxy_keys[idx], cfg.top_n)
        uniq = np.unique(sel)
        active = teachers if cfg.teacher_schedule == "summed" else [teachers[step % k]]
        with T.Tape() as tape:
            out, loss = fusion_loss(student, backbone, E[idx], sel, [t[idx] for t in active],
                                    teacher_keys, cfg.key_nudge)
            if whole:
                trace.append(float(sum(((out.data - t) ** 2).mean() for t in teachers)))
        tape.backward(loss)
        params = [student.prompts[i] for i in uniq]
        if cfg.key_nudge > 0:
            params += student.keys
        T.adam_step(params, opt)
        if not whole:
            trace.append(full_loss())
    if whole:
        trace.append(full_loss())
    student.freeze()
    return FusionResult(student, trace)


# ------------------------------------------------------------------ ledger

@dataclass
class ClientReceipt:
    client_id: int
    checksum: str
    payload_bytes: int
    parameters: int


@dataclass
class RoundLedger:
    round: int
    task: int
    method: str
    receipts: list[ClientReceipt] = field(default_factory=list)
    fused_checksum: str = ""
    distributed_bytes: int = 0
    distill_loss: list[float] = field(default_factory=list)
    complete: bool = False

    @property
    def uploaded_bytes(self) -> int:
        return sum(r.payload_bytes for r in self.receipts)

    @property
    def uploaded_parameters(self) -> int:
        return sum(r.parameters for r in self.receipts)

    def to_text(self) -> str:
        lines = [f"round = {self.round}", f"task = {self.task}", f"method = {self.method}",
                 f"complete = {int(self.complete)}", f"clients = {len(self.receipts)}"]
        for r in self.receipts:
            lines.append(f"client {r.client_id} checksum = {r.checksum} bytes = {r.payload_bytes} "
                         f"params = {r.parameters}")
        lines.append(f"uploaded_bytes = {self.uploaded_bytes}")
        lines.append(f"uploaded_params = {self.uploaded_parameters}")
        lines.append(f"distributed_bytes = {self.distributed_bytes}")
        lines.append(f"fused checksum = {self.fused_checksum}")
        lines.append("distill_loss = " + " ".join(repr(float(v)) for v in self.distill_loss))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RoundLedger":
        f, receipts = {}, []
        for line in text.splitlines():
            if line.startswith("client "):
                parts = line.split()
                receipts.append(ClientReceipt(int(parts[1]), parts[4], int(parts[7]), int(parts[10])))
            elif " = " in line:
                k, v = line.split(" = ", 1)
                f[k] = v
            elif line.endswith(" ="):
                f[line[:-2]] = ""
        return cls(int(f["round"]), int(f["task"]), f["method"], receipts,
                   f.get("fused checksum", ""), int(f["distributed_bytes"]),
                   [float(v) for v in f.get("distill_loss", "").split()], bool(int(f["complete"])))


def payload_size(M: int, L: int, D: int) -> int:
    """Bytes of one serialized global pool."""
    header = f"{P.GLOBAL_MAGIC} M={M} L={L} D={D}\n".encode("ascii")
    return len(header) + 8 * (M * L * D + M * D)


@dataclass
class Server:
    backbone: B.BackboneWeights
    proxy_images: np.ndarray
    fusion: FusionConfig = field(default_factory=FusionConfig)
    method: str = "selective"  # selective | fedavg | none
    proxy_keys: np.ndarray | None = None

    def __post_init__(self):
        if self.method not in ("selective", "fedavg", "none"):
            raise ValueError(f"unknown aggregation method {self.method!r}")
        if self.method == "selective" and self.proxy_keys is None and len(self.proxy_images):
            self.proxy_keys = np.concatenate([
                B.features(self.backbone, B.embed(self.backbone, self.proxy_images[s:s + 128])).data
                for s in range(0, len(self.proxy_images), 128)])

    def aggregate(self, payloads: dict[int, bytes], expected: list[int], round_index: int,
                  task: int) -> tuple[RoundLedger, P.GlobalPromptPool | None]:
        """Decode uploaded pools and fuse them; raises if a client's upload is missing."""
        ledger = RoundLedger(round_index, task, self.method)
        if self.method == "none":
            ledger.complete = True
            return ledger, None
        missing = [c for c in expected if c not in payloads]
        if missing:
            raise RoundIncompleteError(f"round {round_index}: no upload from clients {missing}")
        pools = []
        for cid in expected:
            raw = payloads[cid]
            pool = P.GlobalPromptPool.from_bytes(raw)
            pools.append(pool)
            ledger.receipts.append(ClientReceipt(cid, pool.checksum(), len(raw), pool.num_parameters()))
        if self.method == "fedavg":
            fused = fedavg_pools(pools)
        else:
            res = selective_prompt_fusion(pools, self.proxy_images, self.backbone, self.fusion,
                                          self.proxy_keys)
            fused = res.pool
            ledger.distill_loss = res.loss_trace
        ledger.fused_checksum = fused.checksum()
        ledger.distributed_bytes = len(fused.to_bytes()) * len(expected)
        ledger.complete = True
        return ledger, fused


def collect(clients) -> dict[int, bytes]:
    return {c.client_id: c.global_pool.to_bytes() for c in clients}


def distribute(clients, fused: P.GlobalPromptPool | None) -> None:
    """Overwrite every client's global pool in place with the fused values."""
    if fused is None:
        return
    for c in clients:
        c.global_pool.load_from(fused)


def run_round(clients, server: Server, round_index: int, task: int,
              payloads: dict[int, bytes] | None = None) -> RoundLedger:
    """Collect, aggregate and distribute one round."""
    payloads = collect(clients) if payloads is None else payloads
    ledger, fused = server.aggregate(payloads, [c.client_id for c in clients], round_index, task)
    distribute(clients, fused)
    return ledger
