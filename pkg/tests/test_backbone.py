from __future__ import annotations

import numpy as np
import pytest

from fedmgp import backbone as B
from fedmgp import data as D
from fedmgp import oracles as O
from fedmgp import tensor as T
from fedmgp.tensor import Tensor

from conftest import rng_images


def test_embed_matches_patch_loops(tiny_backbone):
    imgs = rng_images(3)
    got = B.embed(tiny_backbone, imgs).data
    for i in range(3):
        assert np.abs(got[i] - O.embed_reference(tiny_backbone, imgs[i])).max() < 1e-12


def test_single_image_and_wrong_extent(tiny_backbone):
    img = rng_images(1)[0]
    assert B.embed(tiny_backbone, img).shape == (1, 5, 16)
    with pytest.raises(B.ExtentError):
        B.embed(tiny_backbone, np.zeros((1, 9, 9, 3)))


def test_prefixed_attention_matches_loops(tiny_backbone):
    rng = np.random.default_rng(0)
    tok = rng.normal(size=(6, 16))
    pk, pv = rng.normal(size=(3, 16)), rng.normal(size=(3, 16))
    out, attn = B.msa_forward(tiny_backbone, Tensor(tok[None]), 1, (pk, pv), return_attention=True)
    # queries are not extended, keys are: (B, heads, t, lp + t)
    assert attn.shape == (1, 2, 6, 9)
    assert np.abs(out.data[0] - O.attention_reference(tiny_backbone, tok, 1, (pk, pv))).max() < 1e-10


def test_empty_prefix_is_identity(tiny_backbone):
    tok = Tensor(np.random.default_rng(1).normal(size=(1, 5, 16)))
    a = B.msa_forward(tiny_backbone, tok, 0).data
    b = B.msa_forward(tiny_backbone, tok, 0, (np.zeros((0, 16)), np.zeros((0, 16)))).data
    assert np.array_equal(a, b)


def test_prefix_width_mismatch(tiny_backbone):
    tok = Tensor(np.zeros((1, 5, 16)))
    with pytest.raises(B.ExtentError):
        B.msa_forward(tiny_backbone, tok, 0, (np.zeros((2, 8)), np.zeros((2, 8))))


def test_features_with_prompts_and_prefixes_match_reference(tiny_backbone):
    rng = np.random.default_rng(4)
    E = B.embed(tiny_backbone, rng_images(1, seed=4)).data[0]
    prompts = rng.normal(size=(3, 16)) * 0.1
    tokens = np.concatenate([prompts, E])
    prefixes = {0: (rng.normal(size=(2, 16)), rng.normal(size=(2, 16)))}
    got = B.features(tiny_backbone, tokens, prefixes, cls_index=3).data[0]
    ref = O.features_reference(tiny_backbone, tokens, prefixes, cls_index=3)
    assert np.abs(got - ref).max() < 1e-10


def test_prefix_gradient_through_backbone(tiny_backbone):
    rng = np.random.default_rng(2)
    tokens = Tensor(rng.normal(size=(2, 5, 16)))
    pk = Tensor(rng.normal(size=(2, 16)) * 0.3, requires_grad=True)
    pv = Tensor(rng.normal(size=(2, 16)) * 0.3, requires_grad=True)
    target = rng.normal(size=(2, 16))
    with T.Tape() as tape:
        loss = T.mse(B.features(tiny_backbone, tokens, {1: (pk, pv)}), Tensor(target))
    tape.backward(loss)

    def f():
        return T.mse(B.features(tiny_backbone, tokens, {1: (pk, pv)}), Tensor(target)).item()

    worst, _ = O.finite_difference_check(f, [pk, pv], 24, 0)
    assert worst < 1e-5


def test_frozen_backbone_never_records_and_checksum_is_stable(tiny_backbone):
    before = tiny_backbone.checksum()
    x = Tensor(np.zeros((1, 5, 16)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(B.features(tiny_backbone, x))
    tape.backward(loss)
    assert all(p.grad is None for p in tiny_backbone.parameters())
    assert tiny_backbone.checksum() == before


def test_checkpoint_roundtrip_is_byte_exact(tiny_backbone, tmp_path):
    tiny_backbone.metadata = {"warmup_accuracy": 0.5}
    path = tmp_path / "bb.bin"
    B.save_checkpoint(tiny_backbone, path)
    raw = path.read_bytes()
    assert raw[:16] == B.MAGIC and len(B.MAGIC) == 16
    w = B.load_checkpoint(path)
    assert w.checksum() == tiny_backbone.checksum()
    assert w.config == tiny_backbone.config and w.frozen
    assert w.metadata["warmup_accuracy"] == 0.5
    B.save_checkpoint(w, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == raw


def test_checkpoint_rejects_bad_magic_and_trailing_bytes(tiny_backbone, tmp_path):
    path = tmp_path / "bb.bin"
    B.save_checkpoint(tiny_backbone, path)
    raw = path.read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"X" * 16 + raw[16:])
    with pytest.raises(ValueError, match="magic"):
        B.load_checkpoint(tmp_path / "magic.bin")
    (tmp_path / "tail.bin").write_bytes(raw + b"\0" * 8)
    with pytest.raises(ValueError, match="trailing"):
        B.load_checkpoint(tmp_path / "tail.bin")


def test_config_validation():
    with pytest.raises(ValueError):
        B.BackboneConfig(image_side=10, patch_side=4)
    with pytest.raises(ValueError):
        B.BackboneConfig(embed_dim=10, heads=4)


def test_pretraining_learns_and_freezes():
    store = D.gen_synthetic(4, 12, image_side=8, seed=1)
    cfg = B.BackboneConfig(image_side=8, patch_side=4, embed_dim=16, depth=1, heads=2, seed=0)
    w = B.pretrain_and_freeze(cfg, store.images, store.labels, steps=60, batch_size=16, learning_rate=3e-3)
    assert w.frozen and all(not p.requires_grad for p in w.parameters())
    assert w.metadata["warmup_accuracy"] >= 0.75
    w2 = B.pretrain_and_freeze(cfg, store.images, store.labels, steps=60, batch_size=16, learning_rate=3e-3)
    assert w2.checksum() == w.checksum()
