from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmgp import data as D
from fedmgp import oracles as O


def _cifar_bytes(n, seed=0):
    rng = np.random.default_rng(seed)
    rec = np.zeros((n, D.RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = rng.integers(0, 20, n)
    rec[:, 1] = rng.integers(0, 100, n)
    rec[:, 2:] = rng.integers(0, 256, (n, 3072))
    return rec


def test_cifar_loader_layout(tmp_path):
    rec = _cifar_bytes(3)
    (tmp_path / "train.bin").write_bytes(rec.tobytes())
    s = D.load_cifar100(tmp_path / "train.bin")
    assert s.images.shape == (3, 32, 32, 3) and s.labels.tolist() == rec[:, 1].tolist()
    # channel-major on disk: first 1024 bytes after the labels are the red plane
    assert s.images[1, 0, 1, 0] == rec[1, 2 + 1] / 255.0
    assert s.images[1, 0, 0, 2] == rec[1, 2 + 2048] / 255.0


def test_cifar_loader_reports_partial_record(tmp_path):
    rec = _cifar_bytes(2)
    (tmp_path / "train.bin").write_bytes(rec.tobytes()[:-10])
    with pytest.raises(D.CorruptFileError, match=f"offset {D.RECORD_BYTES}"):
        D.load_cifar100(tmp_path / "train.bin")


def test_data_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("DATA_DIR", str(tmp_path))
    assert D.data_dir() == tmp_path
    assert D.data_dir("elsewhere") == D.Path("elsewhere")


def test_synthetic_is_deterministic_and_separable():
    a = D.gen_synthetic(6, 8, image_side=8, seed=2)
    b = D.gen_synthetic(6, 8, image_side=8, seed=2)
    assert np.array_equal(a.images, b.images) and a.images.min() >= 0 and a.images.max() <= 1
    assert O.nearest_template_accuracy(a) >= 0.99
    with pytest.raises(ValueError):
        D.gen_synthetic(1, 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=8), st.integers(0, 200))
def test_largest_remainder_against_loops(props, total):
    s = sum(props)
    if s == 0:
        return
    props = [p / s for p in props]
    got = D.largest_remainder(np.array(props), total)
    assert got.sum() == total and got.tolist() == O.largest_remainder_loops(props, total)


@pytest.mark.parametrize("alpha", [0.1, 1.0, 10.0])
def test_dirichlet_shares_match_gamma_ratio(alpha):
    for label in range(5):
        want = D.largest_remainder(O.dirichlet_gamma_ratio(5, alpha, 9, label), 40)
        assert D.dirichlet_shares(40, 5, alpha, 9, label).tolist() == want.tolist()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]), st.integers(2, 5))
def test_synchronous_partition_laws(seed, tasks, clients):
    store = D.gen_synthetic(8, 10, image_side=4, seed=seed % 7)
    plan = D.split_synchronous(store, clients, tasks, 1.0, seed)
    assert O.partition_violations(plan, store) == []


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(1, 2))
def test_asynchronous_partition_laws(seed, clients, private):
    store = D.gen_synthetic(12, 5, image_side=4, seed=seed % 5)
    plan = D.split_asynchronous(store, clients, private, 2, 2, seed)
    assert O.partition_violations(plan, store) == []
    pub = set(plan.public_classes)
    for c in range(clients):
        mine = set(plan.private_sets[c]) | pub
        for n in range(2):
            assert set(plan.task(c, n).class_set) <= mine


def test_partition_config_errors():
    store = D.gen_synthetic(6, 4, image_side=4)
    with pytest.raises(D.ScenarioConfigError):
        D.split_synchronous(store, 2, 4, 1.0, 0)
    with pytest.raises(D.ScenarioConfigError):
        D.split_asynchronous(store, 4, 2, 2, 2, 0)
    with pytest.raises(D.ScenarioConfigError):
        D.reserve_holdouts(store, 4, 0.5, 0)


def test_holdouts_are_disjoint_and_per_class():
    store = D.gen_synthetic(4, 10, image_side=4)
    proxy, warm, rest = D.reserve_holdouts(store, 2, 0.3, 1)
    o = [set(s.origin.tolist()) for s in (proxy, warm, rest)]
    assert not (o[0] & o[1] or o[0] & o[2] or o[1] & o[2])
    assert len(o[0] | o[1] | o[2]) == 40
    assert np.bincount(proxy.labels).tolist() == [2, 2, 2, 2]
    assert np.bincount(warm.labels).tolist() == [3, 3, 3, 3]


def test_manifest_is_deterministic():
    store = D.gen_synthetic(8, 6, image_side=4)
    a = D.split_synchronous(store, 3, 2, 1.0, 5).to_manifest()
    assert a == D.split_synchronous(store, 3, 2, 1.0, 5).to_manifest()
    assert "client 2 task 1 classes =" in a
