from __future__ import annotations

import numpy as np
import pytest

from fedmgp import backbone as B
from fedmgp import client as C
from fedmgp import oracles as O
from fedmgp import prompts as P
from fedmgp import server as S
from fedmgp import tensor as T

from conftest import rng_images


def _pools(seeds, M=4, L=2, D=16):
    return [P.GlobalPromptPool.initialize(M, L, D, s) for s in seeds]


def test_fedavg_matches_loops_and_is_fixed_point():
    pools = _pools((1, 2, 3), D=5)
    fused = S.fedavg_pools(pools)
    k, p = O.mean_pool_loops(pools)
    assert np.abs(fused.key_matrix() - k).max() < 1e-15
    assert np.abs(fused.prompt_array() - p).max() < 1e-15
    same = _pools((4, 4, 4))
    assert S.fedavg_pools(same).checksum() == same[0].checksum()


def test_fusion_identical_pools_exact_fixed_point(tiny_backbone):
    same = _pools((7, 7))
    for init in S.INIT_MODES:
        res = S.selective_prompt_fusion(same, rng_images(6), tiny_backbone,
                                        S.FusionConfig(distill_steps=5, init=init, top_n=2))
        assert res.pool.checksum() == same[0].checksum()
        assert res.loss_trace == [0.0] * 6


def test_fusion_trace_starts_at_reference_loss(tiny_backbone):
    pools = _pools((1, 2))
    imgs = rng_images(5, seed=3)
    cfg = S.FusionConfig(distill_steps=3, top_n=2)
    res = S.selective_prompt_fusion(pools, imgs, tiny_backbone, cfg)
    ref = O.fusion_loss_reference(S.fedavg_pools(pools), pools, tiny_backbone, imgs, 2)
    assert abs(res.initial_loss - ref) < 1e-10
    assert len(res.loss_trace) == 4 and res.pool.frozen


def test_fusion_minibatch_trace(tiny_backbone):
    res = S.selective_prompt_fusion(_pools((1, 2)), rng_images(8), tiny_backbone,
                                    S.FusionConfig(distill_steps=4, proxy_batch=3, top_n=2,
                                                   teacher_schedule="round_robin"))
    assert len(res.loss_trace) == 5


def test_fusion_loss_gradient_matches_finite_differences(tiny_backbone):
    pools = _pools((1, 2))
    imgs = rng_images(4, seed=5)
    keys = np.stack([B.features(tiny_backbone, B.embed(tiny_backbone, imgs)).data])[0]
    E = B.embed(tiny_backbone, imgs).data
    teachers = []
    for p in pools:
        sel = P.select_global(p, keys, 2)
        tok, cls = P.build_prompted(p, T.Tensor(E), sel)
        teachers.append(B.features(tiny_backbone, tok, cls_index=cls).data)
    tkeys = np.mean([p.key_matrix() for p in pools], axis=0)
    student = S.fedavg_pools(pools)
    student.unfreeze()
    sel = P.select_global(student, keys, 2)
    with T.Tape() as tape:
        _, loss = S.fusion_loss(student, tiny_backbone, E, sel, teachers, tkeys, 0.1)
    tape.backward(loss)
    params = [student.prompts[i] for i in np.unique(sel)] + student.keys

    def f():
        return S.fusion_loss(student, tiny_backbone, E, sel, teachers, tkeys, 0.1)[1].item()

    worst, _ = O.finite_difference_check(f, params, 48, 3)
    assert worst < 1e-5


def test_fusion_input_errors(tiny_backbone):
    with pytest.raises(S.FusionInputError):
        S.fedavg_pools([])
    with pytest.raises(S.FusionInputError):
        S.fedavg_pools([P.GlobalPromptPool.initialize(2, 2, 4, 0), P.GlobalPromptPool.initialize(3, 2, 4, 0)])
    with pytest.raises(S.FusionInputError):
        S.selective_prompt_fusion(_pools((1, 2)), np.zeros((0, 8, 8, 3)), tiny_backbone, S.FusionConfig())
    with pytest.raises(ValueError):
        S.FusionConfig(init="median")


def test_ledger_text_roundtrip():
    led = S.RoundLedger(3, 1, "selective", [S.ClientReceipt(0, "ab", 10, 5), S.ClientReceipt(1, "cd", 10, 5)],
                        "ef", 20, [1.5, 0.25, 1e-17], True)
    back = S.RoundLedger.from_text(led.to_text())
    assert back == led and back.to_text() == led.to_text()
    assert led.uploaded_bytes == 20 and led.uploaded_parameters == 10


def test_server_round_requires_every_upload_and_distributes_in_place(tiny_backbone):
    clients = [C.make_client(i, tiny_backbone, 4, pool_size=3, prompt_length=2, seed=i) for i in range(3)]
    server = S.Server(tiny_backbone, rng_images(4), S.FusionConfig(distill_steps=1, top_n=2), "fedavg")
    payloads = S.collect(clients)
    assert all(len(v) == S.payload_size(3, 2, 16) for v in payloads.values())
    with pytest.raises(S.RoundIncompleteError, match=r"\[2\]"):
        server.aggregate({k: v for k, v in payloads.items() if k != 2}, [0, 1, 2], 0, 0)
    ids = [id(t) for t in clients[1].global_pool.tensors()]
    ledger = S.run_round(clients, server, 0, 0)
    assert ledger.complete and len(ledger.receipts) == 3
    assert {c.global_pool.checksum() for c in clients} == {ledger.fused_checksum}
    assert [id(t) for t in clients[1].global_pool.tensors()] == ids
    assert ledger.distributed_bytes == 3 * S.payload_size(3, 2, 16)


def test_server_none_method_changes_nothing(tiny_backbone):
    clients = [C.make_client(i, tiny_backbone, 4, pool_size=3, prompt_length=2, seed=i) for i in range(2)]
    sums = [c.global_pool.checksum() for c in clients]
    server = S.Server(tiny_backbone, rng_images(2), method="none")
    ledger = S.run_round(clients, server, 0, 0)
    assert ledger.complete and not ledger.receipts
    assert [c.global_pool.checksum() for c in clients] == sums
