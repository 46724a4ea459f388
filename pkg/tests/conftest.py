from __future__ import annotations

import warnings

import numpy as np
import pytest

from fedmgp import backbone as B
from fedmgp import client as C
from fedmgp import data as D
from fedmgp import harness as H

CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_backbone():
    cfg = B.BackboneConfig(image_side=8, patch_side=4, embed_dim=16, depth=2, heads=2, seed=5)
    return B.init_weights(cfg).freeze()


@pytest.fixture
def tiny_store():
    return D.gen_synthetic(6, 10, image_side=8, seed=3)


@pytest.fixture
def tiny_client(tiny_backbone):
    return C.make_client(0, tiny_backbone, 6, pool_size=4, prompt_length=2, prefix_length=2,
                         attached_blocks=(0, 1), seed=11)


def small_config(**kw) -> H.ExperimentConfig:
    """A fast end-to-end configuration for harness tests (seconds, not minutes)."""
    base = dict(classes=8, per_class=20, image_side=8, embed_dim=16, depth=2, heads=2,
                pretrain_steps=40, clients=2, tasks=2, rounds_per_task=1, epochs_global=3,
                epochs_local=3, learning_rate=5e-3, pool_size=4, prompt_length=2, prefix_length=2, distill_steps=2,
                proxy_per_class=1, seeds=(42,))
    base.update(kw)
    return H.ExperimentConfig(**base).validate()


_DESK: dict = {}


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Lazily run the desk scenario (3 seeds) once per ablation for the whole session."""
    root = tmp_path_factory.mktemp("desk")

    def get(ablation: str):
        if ablation not in _DESK:
            cfg = H.ExperimentConfig(ablation=ablation)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                _DESK[ablation] = H.run_experiment(cfg, root / ablation.replace("/", ""))
        return _DESK[ablation]

    return get


def rng_images(n, side=8, seed=0):
    return np.random.default_rng(seed).random((n, side, side, 3))
