"""One test per acceptance criterion; each prints a PASS/FAIL line in the terminal summary."""
from __future__ import annotations

import shutil
import time
import warnings

import numpy as np
import pytest

from fedmgp import backbone as B
from fedmgp import client as C
from fedmgp import data as D
from fedmgp import harness as H
from fedmgp import metrics as MT
from fedmgp import oracles as O
from fedmgp import prompts as P
from fedmgp import server as S
from fedmgp import tensor as T

from conftest import CRITERION_LINES

SEEDS = (42, 1999, 2024)
DESK = H.ExperimentConfig()


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    CRITERION_LINES.append(line)
    print(line)


# ------------------------------------------------------------------ 1

def _fd_problem(seed):
    """Desk-width backbone and one client with a populated local pool, on 4 desk images."""
    bb = B.init_weights(H.backbone_config(DESK, seed)).freeze()
    store = D.gen_synthetic(DESK.classes, 4, DESK.image_side, seed=seed)
    rows = np.random.default_rng(seed).choice(len(store), 4, replace=False)
    batch = store.subset(rows)
    c = C.make_client(0, bb, DESK.classes, pool_size=DESK.pool_size, prompt_length=DESK.prompt_length,
                      prefix_length=DESK.prefix_length, attached_blocks=DESK.attached_blocks, seed=seed)
    c.see(batch.labels)
    for label in batch.labels:
        P.select_by_mask(c.local_pool, label)
    keys = c.raw_keys(batch.images)
    E = B.embed(bb, batch.images).data
    return bb, c, batch, keys, E


def _global_fd(seed):
    bb, c, batch, keys, E = _fd_problem(seed)
    sel = P.select_global(c.global_pool, keys, 3)
    allowed = c.allowed()
    with T.Tape() as tape:
        *_, total, uniq = C.global_loss(c, E, keys, batch.labels, sel, allowed, DESK.lambda1)
    tape.backward(total)
    params = [c.head_g_w, c.head_g_b] + [c.global_pool.prompts[i] for i in uniq] \
        + [c.global_pool.keys[i] for i in uniq]
    return O.finite_difference_check(
        lambda: C.global_loss(c, E, keys, batch.labels, sel, allowed, DESK.lambda1)[3].item(),
        params, 64, seed)[0]


def _local_fd(seed):
    bb, c, batch, keys, E = _fd_problem(seed)
    sel = P.select_global(c.global_pool, keys, 3)
    tokens, cls = P.build_prompted(c.global_pool, T.Tensor(E), sel)
    lk = B.features(bb, tokens.data, cls_index=cls).data
    allowed = c.allowed()
    with T.Tape() as tape:
        total = C.local_loss(c, tokens.data, lk, batch.labels, cls, allowed, DESK.lambda2)[3]
    tape.backward(total)
    params = [c.head_l_w, c.head_l_b] + c.local_pool.tensors()
    return O.finite_difference_check(
        lambda: C.local_loss(c, tokens.data, lk, batch.labels, cls, allowed, DESK.lambda2)[3].item(),
        params, 64, seed)[0]


def _fusion_fd(seed):
    bb, c, batch, keys, E = _fd_problem(seed)
    pools = [P.GlobalPromptPool.initialize(DESK.pool_size, DESK.prompt_length, DESK.embed_dim, seed + i)
             for i in range(2)]
    teachers = []
    for p in pools:
        tok, cls = P.build_prompted(p, T.Tensor(E), P.select_global(p, keys, 3))
        teachers.append(B.features(bb, tok, cls_index=cls).data)
    tkeys = np.mean([p.key_matrix() for p in pools], axis=0)
    student = S.fedavg_pools(pools)
    student.unfreeze()
    sel = P.select_global(student, keys, 3)
    with T.Tape() as tape:
        _, loss = S.fusion_loss(student, bb, E, sel, teachers, tkeys, DESK.key_nudge)
    tape.backward(loss)
    params = [student.prompts[i] for i in np.unique(sel)] + student.keys
    return O.finite_difference_check(
        lambda: S.fusion_loss(student, bb, E, sel, teachers, tkeys, DESK.key_nudge)[1].item(),
        params, 64, seed)[0]


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {}
    for name, fn in (("global", _global_fd), ("local", _local_fd), ("fusion", _fusion_fd)):
        worst[name] = max(fn(s) for s in SEEDS)
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 120
    verdict(1, ok, " ".join(f"{k} worst rel err {v:.1e}" for k, v in worst.items()) + f" in {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2

def test_criterion_2_accounting_exactness():
    t0 = time.perf_counter()
    # 60 prefix tokens per class = 5 tokens x (K, V) x 6 attached blocks; keys counted per pool slot (10)
    pc = P.pool_param_count(10, 10, 768, 100, 5, 6, local_key_count=10)
    elapsed = time.perf_counter() - t0
    ok = (pc.global_prompts == 76_800 and pc.global_keys == 7_680 and pc.transmitted == 84_480
          and pc.trainable == 4_700_160 and elapsed < 1)
    verdict(2, ok, f"transmitted {pc.transmitted} trainable {pc.trainable}")
    assert ok


# ------------------------------------------------------------------ 3

def test_criterion_3_frozen_knowledge_contracts(desk_runs):
    art = desk_runs("full")
    bad = []
    checked = 0
    for s in art.seeds:
        lines = (s.directory / "contracts.txt").read_text().splitlines()
        facts = [l for l in lines if "unchanged =" in l]
        checked += len(facts)
        bad += [f"seed {s.seed}: {l}" for l in facts if not l.endswith("= 1")]
        start = [l for l in lines if l.startswith("backbone start")][0].split(" = ")[1]
        if B.load_checkpoint(s.directory / "backbone.bin").checksum() != start:
            bad.append(f"seed {s.seed}: checkpoint differs from the training backbone")
        kinds = {l.split()[4] for l in facts if l.startswith("round")}
        if kinds != {"global_phase", "local_phase"}:
            bad.append(f"seed {s.seed}: missing phase contracts {kinds}")
    ok = art.complete and not bad and checked > 0
    verdict(3, ok, f"{checked} byte-equality contracts checked, {len(bad)} violated")
    assert ok, bad


def test_criterion_3_frozen_pool_blocks_updates(tiny_client, tiny_store):
    task = tiny_store.subset(np.flatnonzero(tiny_store.labels < 2))
    C.freeze_global(tiny_client)
    before = tiny_client.global_pool.to_bytes()
    C.local_phase(tiny_client, task, C.TrainConfig(batch_size=4, top_n=2))
    with pytest.raises(C.PhaseOrderError):
        C.global_phase(tiny_client, task, C.TrainConfig(batch_size=4, top_n=2))
    assert tiny_client.global_pool.to_bytes() == before


# ------------------------------------------------------------------ 4

def test_criterion_4_metric_correctness():
    worst = 0.0
    round0 = True
    for seed in range(20):
        m = O.random_matrix(seed)
        acc = {k: c / t for k, (c, t) in m.entries.items()}
        for r in m.rounds():
            worst = max(worst, abs(MT.kr_temporal(m, r) - O.kr_temporal_manual(acc, m.clients(), r)),
                        abs(MT.kr_spatial(m, r) - O.kr_spatial_manual(acc, m.clients(), r)))
        round0 &= MT.kr_temporal(m, 0) == 1.0
    m = MT.AccuracyMatrix()
    m.record(0, 0, 0, "local", 9963, 10000)
    m.record(0, 0, 0, "global", 10000, 10000)
    above = MT.kr_spatial(m, 0)
    ok = worst <= 1e-12 and round0 and above > 1
    verdict(4, ok, f"max deviation {worst:.1e}, KR_t(0) == 1 on all 20, KR_s above one = {above:.4f}")
    assert ok


# ------------------------------------------------------------------ 5

def test_criterion_5_partition_laws():
    violations = []
    for seed in range(50):
        store = D.gen_synthetic(16, 10, image_side=4, seed=seed)
        sync = D.split_synchronous(store, 5, 2, 1.0, seed)
        violations += O.partition_violations(sync, store)
        asyn = D.split_asynchronous(store, 5, 2, 4, 2, seed)
        violations += O.partition_violations(asyn, store)
    mismatched = 0
    for seed in range(50):
        for label in range(16):
            want = D.largest_remainder(O.dirichlet_gamma_ratio(5, 1.0, seed, label), 40)
            mismatched += D.dirichlet_shares(40, 5, 1.0, seed, label).tolist() != want.tolist()
    ok = not violations and not mismatched
    verdict(5, ok, f"100 scenarios, {len(violations)} law violations, {mismatched} Dirichlet mismatches")
    assert ok, violations[:5]


# ------------------------------------------------------------------ 6

def test_criterion_6_fusion_sanity():
    store = H.load_store(DESK)
    drops = {}
    for seed in SEEDS:
        _, proxy, warm = H.build_scenario(DESK, store, seed)
        bb = H.pretrained_backbone(DESK, warm, seed)
        pools = [P.GlobalPromptPool.initialize(DESK.pool_size, DESK.prompt_length, DESK.embed_dim, seed + i)
                 for i in range(2)]
        cfg = S.FusionConfig(distill_steps=50, top_n=DESK.top_n, seed=seed)
        res = S.selective_prompt_fusion(pools, proxy.images, bb, cfg)
        drops[seed] = 1 - res.final_loss / res.initial_loss
    same = [P.GlobalPromptPool.initialize(DESK.pool_size, DESK.prompt_length, DESK.embed_dim, 5)] * 2
    fixed_avg = S.fedavg_pools(same).to_bytes() == same[0].to_bytes()
    res = S.selective_prompt_fusion(same, proxy.images, bb, S.FusionConfig(distill_steps=10, top_n=DESK.top_n))
    fixed_spf = res.pool.to_bytes() == same[0].to_bytes()
    ok = all(d >= 0.30 for d in drops.values()) and fixed_avg and fixed_spf
    verdict(6, ok, " ".join(f"seed {s} loss drop {100 * d:.1f}%" for s, d in drops.items())
            + f", fixed point fedavg={fixed_avg} fusion={fixed_spf}")
    assert ok


# ------------------------------------------------------------------ 7

@pytest.mark.xfail(strict=True, reason="temporal-retention gap over w/oLP not reproduced at desk scale; "
                                       "see README and the decision ledger")
def test_criterion_7_directional_ablation(desk_runs):
    t0 = time.perf_counter()
    full, wolp, wogp = desk_runs("full"), desk_runs("w/oLP"), desk_runs("w/oGP")
    elapsed = time.perf_counter() - t0
    kf, kl = full.summary["kr_temporal"], wolp.summary["kr_temporal"]
    af, ag = full.summary["global_average"], wogp.summary["global_average"]
    checks = {"KR_t(full) > KR_t(w/oLP)": kf > kl, "acc(full) > acc(w/oGP)": af > ag,
              "KR_t(full) >= 0.9": kf >= 0.9, "gap >= 0.1": kf - kl >= 0.1}
    ok = all(checks.values()) and full.complete and wolp.complete and wogp.complete
    failed = [k for k, v in checks.items() if not v]
    verdict(7, ok, f"KR_t full {kf:.3f} w/oLP {kl:.3f} (gap {kf - kl:+.3f}); "
                   f"accuracy full {af:.3f} w/oGP {ag:.3f}; "
                   f"personalized full {full.summary['personalized_average']:.3f} "
                   f"w/oGP {wogp.summary['personalized_average']:.3f}; "
                   f"failed: {', '.join(failed) or 'none'}")
    assert ok


# ------------------------------------------------------------------ 8

def test_criterion_8_learning_sanity(desk_runs):
    art = desk_runs("full")
    margins = []
    for s in art.seeds:
        chance = s.summary["chance"]
        per_client = [v for k, v in s.summary.items() if k.startswith("client")]
        margins.append(min(per_client) / chance)
    store = H.load_store(DESK)
    plan, _, warm = H.build_scenario(DESK, store, 42)
    bb = H.pretrained_backbone(DESK, warm, 42)
    c = C.make_client(0, bb, DESK.classes, seed=42)
    batch = store.select_origins(plan.task(0, 0).train).subset(range(DESK.batch_size))
    ratios = {}
    rep = C.global_phase(c, batch, C.TrainConfig(epochs_global=200, batch_size=len(batch), top_n=DESK.top_n))
    ratios["global"] = min(s[0] for s in rep.steps) / rep.steps[0][0]
    C.freeze_global(c)
    rep = C.local_phase(c, batch, C.TrainConfig(epochs_local=200, batch_size=len(batch), top_n=DESK.top_n))
    ratios["local"] = min(s[0] for s in rep.steps) / rep.steps[0][0]
    ok = art.complete and min(margins) >= 3 and all(r < 0.1 for r in ratios.values())
    verdict(8, ok, f"worst client personalized accuracy {min(margins):.1f}x chance; "
                   f"single-batch loss ratio global {ratios['global']:.4f} local {ratios['local']:.4f}")
    assert ok


# ------------------------------------------------------------------ 9

def test_criterion_9_end_to_end_determinism(desk_runs, tmp_path):
    first = desk_runs("full")
    cfg = DESK.replace(seeds=(42,))
    H._BACKBONES.clear()  # force the second run to redo pretraining from scratch
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        second = H.run_experiment(cfg, tmp_path / "second")
    mirror = tmp_path / "first"
    mirror.mkdir()
    (mirror / "config.ini").write_text(cfg.to_ini())
    shutil.copytree(first.directory / "seed_42", mirror / "seed_42")
    for root in (mirror, second.directory):
        H.report(root)
    compared, differ = 0, []
    for path in sorted(p for p in second.directory.rglob("*") if p.is_file()):
        rel = path.relative_to(second.directory)
        if rel.name == "timings.txt":
            continue  # wall-clock measurements
        if len(rel.parts) == 1 and rel.name != "config.ini":
            continue  # run-level summary/status are recomputed from the per-seed files compared here
        compared += 1
        other = mirror / rel
        if not other.exists() or other.read_bytes() != path.read_bytes():
            differ.append(str(rel))
    ok = not differ and compared >= 15
    verdict(9, ok, f"{compared} artifacts compared byte for byte, {len(differ)} differ")
    assert ok, differ
