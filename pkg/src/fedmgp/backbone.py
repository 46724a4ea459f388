"""Tiny Vision Transformer used as the frozen shared feature extractor."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"FEDMGP-BACKBONE1"  # 16 bytes
assert len(MAGIC) == 16


class ExtentError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    image_side: int = 32
    channels: int = 3
    patch_side: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 42

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ValueError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * self.channels


BLOCK_PARAMS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


def weight_names(cfg: BackboneConfig) -> list[str]:
    names = ["patch_w", "patch_b", "cls", "pos"]
    for i in range(cfg.depth):
        names += [f"block{i}.{p}" for p in BLOCK_PARAMS]
    return names + ["norm_g", "norm_b"]


@dataclass
class BackboneWeights:
    config: BackboneConfig
    tensors: dict[str, Tensor]
    metadata: dict = field(default_factory=dict)
    frozen: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return [self.tensors[n] for n in weight_names(self.config)]

    def freeze(self) -> "BackboneWeights":
        for t in self.tensors.values():
            t.requires_grad = False
        self.frozen = True
        return self

    def checksum(self) -> str:
        return T.checksum(self.parameters())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_weights(cfg: BackboneConfig) -> BackboneWeights:
    rng = np.random.default_rng(cfg.seed)
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio

    def lin(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    w: dict[str, np.ndarray] = {
        "patch_w": lin(cfg.patch_dim, d),
        "patch_b": np.zeros(d),
        "cls": rng.normal(0.0, 0.02, size=(d,)),
        "pos": rng.normal(0.0, 0.02, size=(cfg.num_tokens, d)),
    }
    for i in range(cfg.depth):
        p = f"block{i}."
        w[p + "ln1_g"], w[p + "ln1_b"] = np.ones(d), np.zeros(d)
        for name in ("q", "k", "v", "o"):
            w[p + "w" + name] = lin(d, d)
            w[p + "b" + name] = np.zeros(d)
        w[p + "ln2_g"], w[p + "ln2_b"] = np.ones(d), np.zeros(d)
        w[p + "w1"], w[p + "b1"] = lin(d, hidden), np.zeros(hidden)
        w[p + "w2"], w[p + "b2"] = lin(hidden, d), np.zeros(d)
    w["norm_g"], w["norm_b"] = np.ones(d), np.zeros(d)
    return BackboneWeights(cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in w.items()})


# ------------------------------------------------------------------ forward

def unfold_patches(images: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, num_patches, patch_side*patch_side*C), row-major patch order."""
    b = images.shape[0]
    p, g = cfg.patch_side, cfg.image_side // cfg.patch_side
    x = images.reshape(b, g, p, g, p, cfg.channels).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, cfg.patch_dim))


def _check_images(images, cfg: BackboneConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    want = (cfg.image_side, cfg.image_side, cfg.channels)
    if images.ndim != 4 or images.shape[1:] != want:
        raise ExtentError(f"image extents {images.shape[-3:]} do not match config {want}")
    return images


def embed(weights: BackboneWeights, images) -> Tensor:
    """Token matrix (B, tokens, D): class token + patch projections, plus positions."""
    cfg = weights.config
    images = _check_images(images, cfg)
    b = images.shape[0]
    patches = Tensor(unfold_patches(images, cfg))
    proj = patches @ weights["patch_w"] + weights["patch_b"]
    cls = T.broadcast_to(T.reshape(weights["cls"], (1, 1, cfg.embed_dim)), (b, 1, cfg.embed_dim))
    return T.concat([cls, proj], axis=1) + weights["pos"]


def _heads(x: Tensor, b: int, t: int, h: int, dh: int) -> Tensor:
    return T.transpose(T.reshape(x, (b, t, h, dh)), (0, 2, 1, 3))


def msa_forward(weights: BackboneWeights, tokens: Tensor, block: int, prefix=None,
                return_attention: bool = False):
    """Multi-head self-attention of one block on already-normalised tokens.

    ``prefix`` is an optional ``(p_k, p_v)`` pair of (B, lp, D) or (lp, D)
    tensors concatenated in front of the key and value inputs before their
    projections; queries are never extended.
    """
    cfg = weights.config
    pre = f"block{block}."
    b, t, d = tokens.shape
    h, dh = cfg.heads, d // cfg.heads
    kv_k = kv_v = tokens
    if prefix is not None:
        pk, pv = (T.as_tensor(p) for p in prefix)
        if pk.shape != pv.shape or pk.shape[-1] != d:
            raise ExtentError(f"prefix shapes {pk.shape}/{pv.shape} incompatible with width {d}")
        if pk.shape[-2] > 0:
            if pk.ndim == 2:
                pk = T.broadcast_to(T.reshape(pk, (1,) + pk.shape), (b,) + pk.shape)
                pv = T.broadcast_to(T.reshape(pv, (1,) + pv.shape), (b,) + pv.shape)
            kv_k = T.concat([pk, tokens], axis=1)
            kv_v = T.concat([pv, tokens], axis=1)
    s = kv_k.shape[1]
    q = _heads(tokens @ weights[pre + "wq"] + weights[pre + "bq"], b, t, h, dh)
    k = _heads(kv_k @ weights[pre + "wk"] + weights[pre + "bk"], b, s, h, dh)
    v = _heads(kv_v @ weights[pre + "wv"] + weights[pre + "bv"], b, s, h, dh)
    scores = T.mul(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (b, t, d))
    out = ctx @ weights[pre + "wo"] + weights[pre + "bo"]
    return (out, attn) if return_attention else out


def block_forward(weights: BackboneWeights, x: Tensor, block: int, prefix=None) -> Tensor:
    pre = f"block{block}."
    h = T.layer_norm(x, weights[pre + "ln1_g"], weights[pre + "ln1_b"])
    x = x + msa_forward(weights, h, block, prefix)
    h = T.layer_norm(x, weights[pre + "ln2_g"], weights[pre + "ln2_b"])
    h = T.gelu(h @ weights[pre + "w1"] + weights[pre + "b1"])
    return x + (h @ weights[pre + "w2"] + weights[pre + "b2"])


def encode(weights: BackboneWeights, tokens, prefixes: dict | None = None,
           capture: list | None = None) -> Tensor:
    x = T.as_tensor(tokens)
    for i in range(weights.config.depth):
        x = block_forward(weights, x, i, (prefixes or {}).get(i))
        if capture is not None:
            capture.append(x)
    return T.layer_norm(x, weights["norm_g"], weights["norm_b"])


def features(weights: BackboneWeights, tokens, prefixes: dict | None = None,
             cls_index: int = 0) -> Tensor:
    """Final class-token vector (B, D).

    ``cls_index`` is the position of the class token, i.e. the number of
    prompt tokens prepended in front of the embedding.
    """
    x = T.as_tensor(tokens)
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    return encode(weights, x, prefixes)[:, cls_index, :]


# -------------------------------------------------------------- pretraining

def pretrain_and_freeze(config: BackboneConfig, images, labels, steps: int,
                        batch_size: int = 32, learning_rate: float = 1e-3,
                        seed: int | None = None) -> BackboneWeights:
    """Warm up a fresh backbone with a throwaway linear head, then freeze it."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty warmup set")
    weights = init_weights(config)
    n_cls = int(labels.max()) + 1
    rng = np.random.default_rng(config.seed if seed is None else seed)
    head_w = Tensor(rng.normal(0, 0.02, size=(config.embed_dim, n_cls)), requires_grad=True)
    head_b = Tensor(np.zeros(n_cls), requires_grad=True)
    params = weights.parameters() + [head_w, head_b]
    opt = T.AdamState(learning_rate=learning_rate)
    order = rng.permutation(len(images))
    pos = 0
    for _ in range(steps):
        if pos + batch_size > len(order):
            order, pos = rng.permutation(len(images)), 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        with T.Tape() as tape:
            f = features(weights, embed(weights, images[idx]))
            loss = T.cross_entropy(f @ head_w + head_b, labels[idx])
        tape.backward(loss)
        T.adam_step(params, opt)
    weights.freeze()
    preds = []
    for start in range(0, len(images), 256):
        f = features(weights, embed(weights, images[start:start + 256]))
        preds.append(np.argmax(f.data @ head_w.data + head_b.data, axis=1))
    acc = float(np.mean(np.concatenate(preds) == labels))
    weights.metadata = {"warmup_accuracy": acc, "warmup_steps": int(steps),
                        "warmup_samples": int(len(images)), "warmup_classes": n_cls}
    return weights


# -------------------------------------------------------------- checkpoint

def save_checkpoint(weights: BackboneWeights, path) -> None:
    """Write MAGIC, a u64 metadata length, key=value metadata, then float64 LE tensors.

    Tensors follow ``weight_names(config)`` order; each tensor's shape is
    listed in the metadata as ``shape.<name> = d0xd1...``.
    """
    meta = {f"config.{k}": v for k, v in asdict(weights.config).items()}
    meta.update({f"meta.{k}": v for k, v in weights.metadata.items()})
    meta["frozen"] = int(weights.frozen)
    for n in weight_names(weights.config):
        meta[f"shape.{n}"] = "x".join(str(s) for s in weights[n].shape)
    text = "".join(f"{k} = {v}\n" for k, v in meta.items()).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for n in weight_names(weights.config):
            fh.write(weights[n].data.astype("<f8").tobytes())


def _parse_scalar(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def load_checkpoint(path) -> BackboneWeights:
    raw = Path(path).read_bytes()
    if raw[:16] != MAGIC:
        raise ValueError(f"{path}: bad magic header {raw[:16]!r}")
    (n,) = struct.unpack("<Q", raw[16:24])
    meta = {}
    for line in raw[24:24 + n].decode("utf-8").splitlines():
        k, _, v = line.partition(" = ")
        meta[k] = v
    cfg = BackboneConfig(**{k[7:]: int(v) for k, v in meta.items() if k.startswith("config.")})
    offset = 24 + n
    tensors = {}
    for name in weight_names(cfg):
        shape = tuple(int(s) for s in meta[f"shape.{name}"].split("x"))
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        tensors[name] = Tensor(arr.copy(), requires_grad=False, name=name)
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    md = {k[5:]: _parse_scalar(v) for k, v in meta.items() if k.startswith("meta.")}
    w = BackboneWeights(cfg, tensors, md, frozen=bool(int(meta.get("frozen", "1"))))
    if not w.frozen:
        for t in tensors.values():
            t.requires_grad = True
    return w
