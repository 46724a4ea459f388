"""Per-client two-phase prompt training and personalised inference."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as B
from . import prompts as P
from . import tensor as T
from .data import SampleStore
from .tensor import Tensor

INFER_CHUNK = 128


class EmptyTaskError(ValueError):
    pass


class PhaseOrderError(RuntimeError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    epochs_global: int = 1
    epochs_local: int = 1
    batch_size: int = 16
    top_n: int = 5
    learning_rate: float = 1e-3
    seed: int = 42
    train_mask: str = "task"  # training logits: current task's classes ("task") or all seen ("seen")

    def __post_init__(self):
        if self.train_mask not in ("task", "seen"):
            raise ValueError("train_mask must be 'task' or 'seen'")
        for name in ("lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.top_n < 1:
            raise ValueError("batch_size and top_n must be >= 1")


@dataclass
class PhaseReport:
    phase: str
    client_id: int
    task: int
    steps: list[tuple[float, float, float]] = field(default_factory=list)  # (total, ce, surrogate)
    epoch_loss: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")
    global_checksum_before: str = ""
    global_checksum_after: str = ""
    local_checksum_before: str = ""
    local_checksum_after: str = ""


@dataclass
class ClientState:
    client_id: int
    backbone: B.BackboneWeights
    global_pool: P.GlobalPromptPool
    local_pool: P.LocalPromptPool
    num_classes: int
    head_g_w: Tensor
    head_g_b: Tensor
    head_l_w: Tensor
    head_l_b: Tensor
    adam_global: T.AdamState = field(default_factory=T.AdamState)
    adam_local: T.AdamState = field(default_factory=T.AdamState)
    seen_classes: list[int] = field(default_factory=list)
    task_cursor: int = 0
    use_global_prompts: bool = True
    use_local_prompts: bool = True
    frozen_checksum: str | None = None
    phase_counter: int = 0
    key_cache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.backbone.config.embed_dim

    def allowed(self) -> np.ndarray:
        mask = np.zeros(self.num_classes, dtype=bool)
        mask[self.seen_classes] = True
        return mask

    def train_allowed(self, labels, mode: str) -> np.ndarray:
        if mode == "seen":
            return self.allowed()
        mask = np.zeros(self.num_classes, dtype=bool)
        mask[np.unique(labels)] = True
        return mask

    def see(self, labels) -> None:
        self.seen_classes = sorted(set(self.seen_classes) | {int(c) for c in np.unique(labels)})

    def head_tensors(self) -> list[Tensor]:
        return [self.head_g_w, self.head_g_b, self.head_l_w, self.head_l_b]

    def raw_keys(self, images, origins=None) -> np.ndarray:
        """Query keys from the unprompted embedding; cached by origin index (the backbone is frozen)."""
        images = np.asarray(images)
        if origins is None:
            return _raw_features(self.backbone, images)
        origins = [int(o) for o in origins]
        missing = [i for i, o in enumerate(origins) if o not in self.key_cache]
        if missing:
            feats = _raw_features(self.backbone, images[missing])
            for i, f in zip(missing, feats):
                self.key_cache[origins[i]] = f
        return np.stack([self.key_cache[o] for o in origins])


def make_client(client_id: int, backbone: B.BackboneWeights, num_classes: int, *,
                pool_size: int = 10, prompt_length: int = 10, prefix_length: int = 5,
                attached_blocks=(0, 1), seed: int = 42, learning_rate: float = 1e-3) -> ClientState:
    """Pools come from ``seed`` alone so every client starts index-aligned; heads also mix in the client id."""
    d = backbone.config.embed_dim
    gpool = P.GlobalPromptPool.initialize(pool_size, prompt_length, d, seed)
    lpool = P.LocalPromptPool(d, prefix_length, tuple(attached_blocks), seed)
    rng = np.random.default_rng([seed, 0x4EAD, client_id])

    def head():
        return (Tensor(rng.normal(0, 0.02, size=(d, num_classes)), requires_grad=True),
                Tensor(np.zeros(num_classes), requires_grad=True))

    gw, gb = head()
    lw, lb = head()
    return ClientState(client_id, backbone, gpool, lpool, num_classes, gw, gb, lw, lb,
                       adam_global=T.AdamState(learning_rate=learning_rate),
                       adam_local=T.AdamState(learning_rate=learning_rate))


def _raw_features(backbone: B.BackboneWeights, images: np.ndarray) -> np.ndarray:
    out = []
    for s in range(0, len(images), INFER_CHUNK):
        E = B.embed(backbone, images[s:s + INFER_CHUNK])
        out.append(B.features(backbone, E).data)
    return np.concatenate(out) if out else np.zeros((0, backbone.config.embed_dim))


def _embed_np(backbone, images) -> np.ndarray:
    return B.embed(backbone, images).data


def _prompted_tokens(state: ClientState, E: np.ndarray, keys: np.ndarray, top_n: int,
                     pool: P.GlobalPromptPool | None = None):
    """E' for a batch with hard top-N selection; returns (tokens, cls_index, selection)."""
    pool = state.global_pool if pool is None else pool
    if not state.use_global_prompts:
        return Tensor(E), 0, None
    sel = P.select_global(pool, keys, top_n)
    tokens, cls = P.build_prompted(pool, Tensor(E), sel)
    return tokens, cls, sel


def _guard(fn, state: ClientState, phase: str):
    try:
        return fn()
    except T.NonFiniteError as exc:
        raise TrainingDivergedError(
            f"client {state.client_id} {phase} task {state.task_cursor}: {exc}") from exc


def _batches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def global_loss(state: ClientState, E: np.ndarray, keys: np.ndarray, labels, selection: np.ndarray,
                allowed: np.ndarray, lambda1: float):
    """Cross-entropy through H_g on E' plus lambda1 * summed key distance to the selected keys.

    Returns (logits, ce, surrogate, total, selected pool indices).
    """
    pool = state.global_pool
    tokens, cls = P.build_prompted(pool, Tensor(E), selection)
    f = B.features(state.backbone, tokens, cls_index=cls)
    logits = T.mask_logits(f @ state.head_g_w + state.head_g_b, allowed)
    ce = T.cross_entropy(logits, labels)
    sel_keys, uniq = P.gather_keys(pool.keys, selection)
    dist = T.cosine_distance(Tensor(keys[:, None, :]), sel_keys)
    sur = T.mean(T.tsum(dist, axis=1))
    return logits, ce, sur, ce + T.mul(sur, lambda1), uniq


def local_loss(state: ClientState, tokens: np.ndarray, local_keys: np.ndarray, labels, cls_index: int,
               allowed: np.ndarray, lambda2: float):
    """Cross-entropy through the label-prefixed forward and H_l plus lambda2 * distance to the label key.

    Returns (logits, ce, surrogate, total).
    """
    lpool = state.local_pool
    labels = np.asarray(labels)
    prefixes = P.gather_prefixes(lpool, labels)
    f = B.features(state.backbone, Tensor(tokens), prefixes, cls_index=cls_index)
    logits = T.mask_logits(f @ state.head_l_w + state.head_l_b, allowed)
    ce = T.cross_entropy(logits, labels)
    present = np.unique(labels)
    k, _ = P.gather_keys([lpool.entries[int(c)].key for c in present],
                         np.searchsorted(present, labels)[:, None])
    dist = T.cosine_distance(Tensor(local_keys[:, None, :]), k)
    sur = T.mean(T.tsum(dist, axis=1))
    return logits, ce, sur, ce + T.mul(sur, lambda2)


def global_phase(state: ClientState, task: SampleStore, cfg: TrainConfig) -> PhaseReport:
    """Train H_g and the selected global prompts/keys on cross-entropy + lambda1 * key surrogate."""
    if len(task) == 0:
        raise EmptyTaskError(f"client {state.client_id}: empty task")
    if state.global_pool.frozen:
        raise PhaseOrderError("global pool is frozen; unfreeze before the global phase")
    state.see(task.labels)
    pool = state.global_pool
    rep = PhaseReport("global", state.client_id, state.task_cursor,
                      global_checksum_before=pool.checksum(),
                      local_checksum_before=state.local_pool.checksum())
    state.adam_global.learning_rate = cfg.learning_rate
    allowed = state.train_allowed(task.labels, cfg.train_mask)
    keys = state.raw_keys(task.images, task.origin)
    E = _embed_np(state.backbone, task.images)
    rng = np.random.default_rng([cfg.seed, state.client_id, state.phase_counter, 0x6])
    state.phase_counter += 1
    hits = 0
    for _ in range(cfg.epochs_global):
        ep = []
        for idx in _batches(len(task), cfg.batch_size, rng):
            sel = P.select_global(pool, keys[idx], cfg.top_n)

            def step():
                with T.Tape() as tape:
                    logits, ce, sur, total, uniq = global_loss(state, E[idx], keys[idx], task.labels[idx],
                                                               sel, allowed, cfg.lambda1)
                tape.backward(total)
                return logits, ce, sur, total, uniq

            logits, ce, sur, total, uniq = _guard(step, state, "global phase")
            hits += int((np.argmax(logits.data, axis=1) == task.labels[idx]).sum())
            rep.steps.append((total.item(), ce.item(), sur.item()))
            ep.append(total.item())
            params = [state.head_g_w, state.head_g_b]
            params += [pool.keys[i] for i in uniq] + [pool.prompts[i] for i in uniq]
            T.adam_step(params, state.adam_global)
        rep.epoch_loss.append(float(np.mean(ep)))
    rep.train_accuracy = hits / (len(task) * max(cfg.epochs_global, 1))
    rep.global_checksum_after = pool.checksum()
    rep.local_checksum_after = state.local_pool.checksum()
    return rep


def freeze_global(state: ClientState) -> str:
    state.global_pool.freeze()
    state.frozen_checksum = state.global_pool.checksum()
    return state.frozen_checksum


def unfreeze_global(state: ClientState) -> None:
    state.global_pool.unfreeze()
    state.frozen_checksum = None


def local_phase(state: ClientState, task: SampleStore, cfg: TrainConfig) -> PhaseReport:
    """Train H_l and the label-selected class prefixes/keys with global prompts held frozen."""
    if len(task) == 0:
        raise EmptyTaskError(f"client {state.client_id}: empty task")
    if state.use_global_prompts and not state.global_pool.frozen:
        raise PhaseOrderError("global prompts must be frozen before the local phase")
    state.see(task.labels)
    lpool = state.local_pool
    rep = PhaseReport("local", state.client_id, state.task_cursor,
                      global_checksum_before=state.global_pool.checksum(),
                      local_checksum_before=lpool.checksum())
    state.adam_local.learning_rate = cfg.learning_rate
    allowed = state.train_allowed(task.labels, cfg.train_mask)
    keys = state.raw_keys(task.images, task.origin)
    E = _embed_np(state.backbone, task.images)
    # global prompts are frozen for the whole phase, so E' and its key are fixed
    tokens_all, cls, _ = _prompted_tokens(state, E, keys, cfg.top_n)
    tokens_all = tokens_all.data
    local_keys = np.concatenate([
        B.features(state.backbone, tokens_all[s:s + INFER_CHUNK], cls_index=cls).data
        for s in range(0, len(task), INFER_CHUNK)])
    for label in task.labels:
        P.select_by_mask(lpool, label)
    rng = np.random.default_rng([cfg.seed, state.client_id, state.phase_counter, 0x7])
    state.phase_counter += 1
    hits = 0
    for _ in range(cfg.epochs_local):
        ep = []
        for idx in _batches(len(task), cfg.batch_size, rng):
            y = task.labels[idx]

            def step():
                with T.Tape() as tape:
                    logits, ce, sur, total = local_loss(state, tokens_all[idx], local_keys[idx], y, cls,
                                                        allowed, cfg.lambda2)
                tape.backward(total)
                return logits, ce, sur, total

            logits, ce, sur, total = _guard(step, state, "local phase")
            hits += int((np.argmax(logits.data, axis=1) == y).sum())
            rep.steps.append((total.item(), ce.item(), sur.item()))
            ep.append(total.item())
            params = [state.head_l_w, state.head_l_b]
            for c in np.unique(y):
                params += lpool.entries[int(c)].tensors()
            T.adam_step(params, state.adam_local)
        rep.epoch_loss.append(float(np.mean(ep)))
    rep.train_accuracy = hits / (len(task) * max(cfg.epochs_local, 1))
    rep.global_checksum_after = state.global_pool.checksum()
    rep.local_checksum_after = lpool.checksum()
    return rep


# ----------------------------------------------------------------- inference

def _masked_argmax(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    return np.argmax(np.where(allowed, logits, -np.inf), axis=-1)


def infer_global(state: ClientState, images, pool_override: P.GlobalPromptPool | None = None,
                 top_n: int = 5, origins=None):
    """Global path: query (own or overriding) pool, prepend, unprefixed forward, H_g."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if not state.seen_classes:
        raise PhaseOrderError("no trained task yet")
    allowed = state.allowed()
    out = []
    for s in range(0, len(images), INFER_CHUNK):
        chunk = images[s:s + INFER_CHUNK]
        keys = state.raw_keys(chunk, None if origins is None else origins[s:s + INFER_CHUNK])
        E = _embed_np(state.backbone, chunk)
        tokens, cls, _ = _prompted_tokens(state, E, keys, top_n, pool_override)
        f = B.features(state.backbone, tokens, cls_index=cls).data
        out.append(_masked_argmax(f @ state.head_g_w.data + state.head_g_b.data, allowed))
    preds = np.concatenate(out)
    return int(preds[0]) if single else preds


def infer_personalized(state: ClientState, images, top_n: int = 5, origins=None):
    """Personalised path: global query -> E' -> local top-1 -> prefixed forward -> H_l."""
    if not state.use_local_prompts or len(state.local_pool) == 0:
        return infer_global(state, images, top_n=top_n, origins=origins)
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    allowed = state.allowed()
    out = []
    for s in range(0, len(images), INFER_CHUNK):
        chunk = images[s:s + INFER_CHUNK]
        keys = state.raw_keys(chunk, None if origins is None else origins[s:s + INFER_CHUNK])
        E = _embed_np(state.backbone, chunk)
        tokens, cls, _ = _prompted_tokens(state, E, keys, top_n)
        lkeys = B.features(state.backbone, tokens, cls_index=cls).data
        chosen = P.select_local(state.local_pool, lkeys)
        prefixes = P.gather_prefixes(state.local_pool, chosen)
        f = B.features(state.backbone, tokens, prefixes, cls_index=cls).data
        out.append(_masked_argmax(f @ state.head_l_w.data + state.head_l_b.data, allowed))
    preds = np.concatenate(out)
    return int(preds[0]) if single else preds
