import importlib.util
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from keystego.config import settings
from keystego.keyed_weights import KeyRegistry
from keystego.models import BackboneConfig, DatasetSpec, LossWeights, RunConfig, TrainConfig

ROOT = Path(__file__).resolve().parent.parent


def pytest_collection_modifyitems(config, items):
    if os.environ.get("KEYSTEGO_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="desk-scale experiment; set KEYSTEGO_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def random_images(n: int, side: int, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, side, side, generator=gen)


def synthetic_module():
    """The dataset generator script, loaded as a module."""
    path = ROOT / "scripts" / "make_synthetic_dataset.py"
    spec = importlib.util.spec_from_file_location("make_synthetic_dataset", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def tiny_run_config(side: int = 16, width: int = 4, depth: int = 1, loss: LossWeights = None, **train) -> RunConfig:
    defaults = dict(
        num_keys=2, alpha=0.7, batch_size=2, steps=4, learning_rate=1e-2,
        eval_every=0, checkpoint_every=0, log_every=1, eval_samples=2,
    )
    defaults.update(train)
    return RunConfig(
        run_name="tiny",
        backbone=BackboneConfig(width=width, depth=depth, side=side),
        loss=loss or LossWeights(),
        train=TrainConfig(**defaults),
        data=DatasetSpec(side=side),
    )


@pytest.fixture
def tiny_backbone() -> BackboneConfig:
    return BackboneConfig(width=8, depth=2, side=16)


@pytest.fixture
def registry() -> KeyRegistry:
    return KeyRegistry.random(3, seed=11)


@pytest.fixture
def images() -> torch.Tensor:
    return random_images(12, 16, seed=3)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def isolated_settings(tmp_path, monkeypatch):
    """Point runs/log paths into tmp_path and clear any key material from the environment."""
    monkeypatch.setattr(settings, "runs_dir", str(tmp_path / "runs"))
    monkeypatch.setattr(settings, "log_file", str(tmp_path / "logs" / "keystego.log"))
    monkeypatch.setattr(settings, "keys", None)
    return settings
