"""Independent reference computations and the quick oracle suite behind ``fedmgp verify``.

Everything here is deliberately written the slow, obvious way (explicit
loops, per-sample forwards, extended precision) and shares no code path
with the vectorised implementation it checks, beyond reading weights.
"""
from __future__ import annotations

import math
from decimal import Decimal, getcontext
from typing import Callable

import numpy as np

from . import backbone as B
from . import client as C
from . import data as D
from . import metrics as MT
from . import prompts as P
from . import server as S
from . import tensor as T

getcontext().prec = 50
GELU_C = math.sqrt(2.0 / math.pi)


# ----------------------------------------------------------- scalar algebra

def matmul_loops(a, b) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = math.fsum(a[i, t] * b[t, j] for t in range(k))
    return out


def softmax_extended(x) -> list[float]:
    xs = [Decimal(repr(float(v))) for v in x]
    top = max(xs)
    e = [(v - top).exp() for v in xs]
    s = sum(e)
    return [float(v / s) for v in e]


def cross_entropy_extended(logits, label: int) -> float:
    xs = [Decimal(repr(float(v))) for v in logits]
    lse = sum(v.exp() for v in xs).ln()
    return float(lse - xs[label])


def cosine_loops(u, v) -> float:
    dot = math.fsum(a * b for a, b in zip(u, v))
    nu = math.sqrt(math.fsum(a * a for a in u))
    nv = math.sqrt(math.fsum(b * b for b in v))
    return 1.0 - dot / (nu * nv)


def adam_hand_step(value: float, grad: float, m: float, v: float, t: int, lr=1e-3,
                   b1=0.9, b2=0.999, eps=1e-8) -> tuple[float, float, float]:
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mh = m / (1 - b1 ** t)
    vh = v / (1 - b2 ** t)
    return value - lr * mh / (math.sqrt(vh) + eps), m, v


def finite_difference_check(loss_fn: Callable[[], float], params: list, count: int, seed: int,
                            h: float = 1e-5) -> tuple[float, list]:
    """Compare ``p.grad`` (already populated) with central differences on random coordinates.

    Returns the worst relative error and the per-coordinate records.
    """
    rng = np.random.default_rng(seed)
    coords = []
    sizes = np.array([p.size for p in params])
    for _ in range(count):
        pi = int(rng.choice(len(params), p=sizes / sizes.sum()))
        coords.append((pi, int(rng.integers(params[pi].size))))
    worst, rows = 0.0, []
    for pi, ci in coords:
        p = params[pi]
        flat = p.data.reshape(-1)
        keep = flat[ci]
        flat[ci] = keep + h
        up = loss_fn()
        flat[ci] = keep - h
        down = loss_fn()
        flat[ci] = keep
        numeric = (up - down) / (2 * h)
        analytic = float(p.grad.reshape(-1)[ci])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        rows.append((pi, ci, analytic, numeric, err))
        worst = max(worst, err)
    return worst, rows


# --------------------------------------------------------- reference ViT

def _ln(x, g, b, eps=1e-6):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x ** 3)))


def embed_reference(weights: B.BackboneWeights, image: np.ndarray) -> np.ndarray:
    """Patch-by-patch unfold and projection for one (H, W, C) image."""
    cfg = weights.config
    p, g = cfg.patch_side, cfg.image_side // cfg.patch_side
    rows = [weights["cls"].data.copy()]
    for gi in range(g):
        for gj in range(g):
            patch = image[gi * p:(gi + 1) * p, gj * p:(gj + 1) * p, :].reshape(-1)
            rows.append(patch @ weights["patch_w"].data + weights["patch_b"].data)
    return np.stack(rows) + weights["pos"].data


def attention_reference(weights: B.BackboneWeights, tokens: np.ndarray, block: int,
                        prefix=None) -> np.ndarray:
    """Per-head, per-query loop over already normalised (t, D) tokens."""
    cfg = weights.config
    w = {k: weights[f"block{block}.{k}"].data for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    t, d = tokens.shape
    h = cfg.heads
    dh = d // h
    kin, vin = tokens, tokens
    if prefix is not None and len(prefix[0]):
        kin = np.concatenate([prefix[0], tokens])
        vin = np.concatenate([prefix[1], tokens])
    q = tokens @ w["wq"] + w["bq"]
    k = kin @ w["wk"] + w["bk"]
    v = vin @ w["wv"] + w["bv"]
    ctx = np.zeros((t, d))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(t):
            scores = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dh) for j in range(len(k))]
            probs = softmax_extended(scores)
            ctx[i, sl] = sum(pj * v[j, sl] for j, pj in enumerate(probs))
    return ctx @ w["wo"] + w["bo"]


def features_reference(weights: B.BackboneWeights, tokens: np.ndarray, prefixes=None,
                       cls_index: int = 0) -> np.ndarray:
    x = np.array(tokens, dtype=np.float64)
    for i in range(weights.config.depth):
        pre = f"block{i}."
        g = lambda n: weights[pre + n].data  # noqa: E731
        hn = np.stack([_ln(r, g("ln1_g"), g("ln1_b")) for r in x])
        x = x + attention_reference(weights, hn, i, (prefixes or {}).get(i))
        hn = np.stack([_ln(r, g("ln2_g"), g("ln2_b")) for r in x])
        x = x + _gelu(hn @ g("w1") + g("b1")) @ g("w2") + g("b2")
    return _ln(x[cls_index], weights["norm_g"].data, weights["norm_b"].data)


def topn_full_sort(query, keys, n: int) -> list[int]:
    dist = [(cosine_loops(query, k), i) for i, k in enumerate(keys)]
    return [i for _, i in sorted(dist)[:n]]


def personalized_reference(state: C.ClientState, image: np.ndarray, top_n: int) -> int:
    """Query chain for one image written out step by step."""
    bb = state.backbone
    E = embed_reference(bb, image)
    raw = features_reference(bb, E)
    tokens, cls = E, 0
    if state.use_global_prompts:
        sel = topn_full_sort(raw, state.global_pool.key_matrix(), top_n)
        tokens = np.concatenate([state.global_pool.prompts[i].data for i in sel] + [E])
        cls = len(sel) * state.global_pool.L
    if not state.use_local_prompts or not len(state.local_pool):
        return global_reference(state, image, None, top_n)
    lk = features_reference(bb, tokens, cls_index=cls)
    classes = state.local_pool.classes
    best = topn_full_sort(lk, [state.local_pool.entries[c].key.data for c in classes], 1)[0]
    entry = state.local_pool.entries[classes[best]]
    prefixes = {b: (pk.data, pv.data) for b, (pk, pv) in entry.prefixes.items()}
    f = features_reference(bb, tokens, prefixes, cls)
    logits = f @ state.head_l_w.data + state.head_l_b.data
    return _masked_argmax_loop(logits, state.seen_classes)


def global_reference(state: C.ClientState, image: np.ndarray, pool, top_n: int) -> int:
    bb = state.backbone
    pool = state.global_pool if pool is None else pool
    E = embed_reference(bb, image)
    tokens, cls = E, 0
    if state.use_global_prompts:
        raw = features_reference(bb, E)
        sel = topn_full_sort(raw, pool.key_matrix(), top_n)
        tokens = np.concatenate([pool.prompts[i].data for i in sel] + [E])
        cls = len(sel) * pool.L
    f = features_reference(bb, tokens, cls_index=cls)
    logits = f @ state.head_g_w.data + state.head_g_b.data
    return _masked_argmax_loop(logits, state.seen_classes)


def _masked_argmax_loop(logits, seen) -> int:
    best, arg = -math.inf, -1
    for c in sorted(seen):
        if logits[c] > best:
            best, arg = logits[c], c
    return arg


# ---------------------------------------------------------- fusion / pools

def fusion_loss_reference(student: P.GlobalPromptPool, teachers: list[P.GlobalPromptPool],
                          backbone: B.BackboneWeights, proxy_images: np.ndarray, top_n: int) -> float:
    """Summed-over-teachers MSE between prompted class-token features, sample by sample."""
    total = []
    for img in proxy_images:
        E = B.embed(backbone, img[None]).data[0]
        raw = B.features(backbone, E).data[0]

        def out(pool):
            sel = topn_full_sort(raw, pool.key_matrix(), top_n)
            tok = np.concatenate([pool.prompts[i].data for i in sel] + [E])
            return B.features(backbone, tok, cls_index=len(sel) * pool.L).data[0]

        s = out(student)
        total.append(math.fsum(float(((s - out(t)) ** 2).mean()) for t in teachers))
    return math.fsum(total) / len(total)


def mean_pool_loops(pools: list[P.GlobalPromptPool]) -> tuple[np.ndarray, np.ndarray]:
    m, l, d = pools[0].shape()
    keys = np.zeros((m, d))
    prompts = np.zeros((m, l, d))
    for i in range(m):
        for j in range(d):
            keys[i, j] = math.fsum(p.keys[i].data[j] for p in pools) / len(pools)
            for r in range(l):
                prompts[i, r, j] = math.fsum(p.prompts[i].data[r, j] for p in pools) / len(pools)
    return keys, prompts


# ------------------------------------------------------------ partitions

def dirichlet_gamma_ratio(clients: int, alpha: float, seed: int, label: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xD1, int(label)])
    g = rng.standard_gamma(alpha, size=clients)
    return g / g.sum()


def largest_remainder_loops(props, total: int) -> list[int]:
    raw = [p * total for p in props]
    base = [int(math.floor(r)) for r in raw]
    left = total - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def partition_violations(plan: D.ScenarioPlan, store: D.SampleStore) -> list[str]:
    """Exhaustive checks of the task-stream laws; returns human-readable violations."""
    out = []
    assigned = plan.all_assigned()
    if len(assigned) != len(set(assigned)):
        out.append("an origin index is assigned twice")
    every = set(int(o) for o in store.origin)
    covered = set(assigned) | set(plan.dropped)
    if covered != every:
        out.append(f"{len(every - covered)} origins unassigned, {len(covered - every)} unknown")
    label_of = {int(o): int(l) for o, l in zip(store.origin, store.labels)}
    for (c, n), t in plan.streams.items():
        for o in t.train + t.test:
            if label_of[o] not in t.class_set:
                out.append(f"client {c} task {n}: origin {o} outside class set")
                break
        if set(t.train) & set(t.test):
            out.append(f"client {c} task {n}: train/test overlap")
    if plan.mode == "synchronous":
        for n in range(plan.tasks):
            sets = [tuple(plan.task(c, n).class_set) for c in range(plan.clients)]
            if len(set(sets)) != 1:
                out.append(f"task {n}: clients disagree on classes")
        for n in range(plan.tasks):
            for m in range(n + 1, plan.tasks):
                if set(plan.task(0, n).class_set) & set(plan.task(0, m).class_set):
                    out.append(f"tasks {n} and {m} share classes")
    else:
        priv = plan.private_sets
        for i in range(len(priv)):
            for j in range(i + 1, len(priv)):
                if set(priv[i]) & set(priv[j]):
                    out.append(f"private sets {i} and {j} intersect")
            for j in range(len(priv)):
                if j == i:
                    continue
                for n in range(plan.tasks):
                    if set(priv[i]) & set(plan.task(j, n).class_set):
                        out.append(f"client {j} holds private class of client {i}")
    return out


def nearest_template_accuracy(store: D.SampleStore) -> float:
    templates = {c: store.images[store.rows_of_class(c)].mean(axis=0) for c in store.classes}
    hits = 0
    for img, lab in zip(store.images, store.labels):
        best = min(templates, key=lambda c: float(((img - templates[c]) ** 2).sum()))
        hits += int(best == lab)
    return hits / len(store)


# --------------------------------------------------------------- metrics

def kr_temporal_manual(acc: dict, clients, r: int) -> float:
    """``acc[(client, round, task, model)] = accuracy``; zero denominators skipped."""
    ratios = []
    for c in clients:
        den = acc[(c, 0, 0, "local")]
        if den != 0:
            ratios.append(acc[(c, r, 0, "local")] / den)
    return math.fsum(ratios) / len(ratios)


def kr_spatial_manual(acc: dict, clients, r: int) -> float:
    ratios = []
    for c in clients:
        task = max(k[2] for k in acc if k[0] == c and k[1] == r)
        den = acc[(c, r, task, "local")]
        if den != 0:
            ratios.append(acc[(c, r, task, "global")] / den)
    return math.fsum(ratios) / len(ratios)


def random_matrix(seed: int, clients: int = 5, rounds: int = 4, tasks: int = 2,
                  rounds_per_task: int = 2) -> MT.AccuracyMatrix:
    rng = np.random.default_rng(seed)
    m = MT.AccuracyMatrix()
    for c in range(clients):
        for r in range(rounds):
            cur = min(r // rounds_per_task, tasks - 1)
            for t in range(cur + 1):
                for model in MT.MODELS:
                    total = int(rng.integers(5, 40))
                    m.record(c, r, t, model, int(rng.integers(1, total + 1)), total)
    return m


def count_pool_tensors(M, L, D, C, lp, blocks) -> int:
    pool = P.GlobalPromptPool.initialize(M, L, D, 0) if M else None
    local = P.LocalPromptPool(D, lp, tuple(range(blocks)), 0)
    for c in range(C):
        P.select_by_mask(local, c)
    return (pool.num_parameters() if pool else 0) + local.num_parameters()


# ------------------------------------------------------------ the suite

def _check(name, ok, detail=""):
    return name, bool(ok), detail


def run_suite() -> list[tuple[str, bool, str]]:
    """Fast oracle comparisons; each entry is (name, passed, detail)."""
    res = []
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    res.append(_check("matmul vs triple loop", np.abs(got - matmul_loops(a, b)).max() < 1e-12))

    x = np.array([1.0, 2.0, 3.0])
    got = T.softmax(T.Tensor(x)).data
    res.append(_check("softmax vs extended precision", np.abs(got - softmax_extended(x)).max() < 1e-12))
    got = T.cross_entropy(T.Tensor(x), 2).item()
    res.append(_check("cross-entropy vs extended precision", abs(got - cross_entropy_extended(x, 2)) < 1e-12))

    rng = np.random.default_rng(11)
    u, v = rng.normal(size=8), rng.normal(size=8)
    res.append(_check("cosine distance vs loops", abs(P.cosine_distance(u, v) - cosine_loops(u, v)) < 1e-12))

    p = T.Tensor(np.zeros(1), requires_grad=True)
    p.grad = np.ones(1)
    T.adam_step([p], T.AdamState())
    want, _, _ = adam_hand_step(0.0, 1.0, 0.0, 0.0, 1)
    res.append(_check("adam vs hand step", abs(p.data[0] - want) < 1e-15))

    cfg = B.BackboneConfig(image_side=8, patch_side=4, embed_dim=8, depth=2, heads=2, seed=42)
    w = B.init_weights(cfg).freeze()
    img = np.random.default_rng(42).random((8, 8, 3))
    got = B.embed(w, img[None]).data[0]
    res.append(_check("embed vs unfold loops", np.abs(got - embed_reference(w, img)).max() < 1e-10))

    cfg1 = B.BackboneConfig(image_side=8, patch_side=4, embed_dim=8, depth=1, heads=1, seed=3)
    w1 = B.init_weights(cfg1).freeze()
    rng = np.random.default_rng(3)
    tok, pk, pv = rng.normal(size=(5, 8)), rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    out, attn = B.msa_forward(w1, T.Tensor(tok[None]), 0, (pk, pv), return_attention=True)
    ref = attention_reference(w1, tok, 0, (pk, pv))
    res.append(_check("prefixed attention vs single-head loops",
                      attn.shape[-1] == 7 and np.abs(out.data[0] - ref).max() < 1e-10))

    tokens = B.embed(w, img[None]).data[0]
    res.append(_check("features vs reference forward",
                      np.abs(B.features(w, tokens).data[0] - features_reference(w, tokens)).max() < 1e-10))

    pool = P.GlobalPromptPool.initialize(10, 3, 8, 42)
    q = np.random.default_rng(42).normal(size=8)
    res.append(_check("top-N vs full sort",
                      P.query_global(pool, q, 5).indices == topn_full_sort(q, pool.key_matrix(), 5)))

    local = P.LocalPromptPool(8, 2, (0,), 42)
    for c in range(10):
        P.select_by_mask(local, c)
    res.append(_check("local top-1 vs full sort",
                      P.query_local(local, q).indices[0]
                      == local.classes[topn_full_sort(q, local.key_matrix(), 1)[0]]))

    pools = [P.GlobalPromptPool.initialize(4, 3, 5, s) for s in (7, 8, 9)]
    fused = S.fedavg_pools(pools)
    k_ref, p_ref = mean_pool_loops(pools)
    res.append(_check("fedavg vs naive loops",
                      np.abs(fused.key_matrix() - k_ref).max() < 1e-12
                      and np.abs(fused.prompt_array() - p_ref).max() < 1e-12))

    ok = True
    for label in range(5):
        got = D.dirichlet_shares(10, 2, 1.0, 42, label)
        want = largest_remainder_loops(dirichlet_gamma_ratio(2, 1.0, 42, label), 10)
        ok &= list(got) == want
    res.append(_check("dirichlet shares vs gamma ratio", ok))

    store = D.gen_synthetic(8, 40, seed=0)
    acc = nearest_template_accuracy(store)
    res.append(_check("synthetic nearest-template >= 99%", acc >= 0.99, f"{acc:.3f}"))

    viol = []
    for seed in range(5):
        s = D.gen_synthetic(16, 12, image_side=4, seed=seed)
        viol += partition_violations(D.split_synchronous(s, 5, 2, 1.0, seed), s)
        viol += partition_violations(D.split_asynchronous(s, 5, 2, 4, 2, seed), s)
    res.append(_check("partition laws (exhaustive)", not viol, "; ".join(viol[:3])))

    ok = True
    for seed in range(5):
        m = random_matrix(seed)
        accd = {k: c / t for k, (c, t) in m.entries.items()}
        for r in m.rounds():
            ok &= abs(MT.kr_temporal(m, r) - kr_temporal_manual(accd, m.clients(), r)) < 1e-12
            ok &= abs(MT.kr_spatial(m, r) - kr_spatial_manual(accd, m.clients(), r)) < 1e-12
    res.append(_check("KR metrics vs manual recomputation", ok))

    pc = P.pool_param_count(10, 10, 64, 8, 5, (0, 1))
    res.append(_check("desk accounting vs live tensors",
                      pc.trainable == 17_792 == count_pool_tensors(10, 10, 64, 8, 5, 2)))
    return res
