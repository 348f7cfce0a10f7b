from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from pynexus.data import FEATURES, AlignedDataset
from pynexus.model import NexusConfig
from pynexus.synth import SynthConfig, SynthResult, generate
from pynexus.training import TrainConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config() -> NexusConfig:
    """Small enough for finite differences over every parameter."""
    return NexusConfig(
        L=2,
        T=8,
        D=2,
        p=2,
        s=2,
        r=2,
        mix_rank=2,
        d_hidden=4,
        head_hidden=3,
        fusion_hidden=3,
        K=2,
        dropout_rate=0.0,
    )


@pytest.fixture
def tiny_config() -> NexusConfig:
    return NexusConfig(
        L=4,
        T=16,
        D=9,
        p=4,
        s=2,
        r=8,
        mix_rank=4,
        d_hidden=8,
        head_hidden=8,
        fusion_hidden=4,
    )


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(max_epochs=3, patience=2, batch_size=16, eta0=0.005)


@pytest.fixture(scope="session")
def synth_result() -> SynthResult:
    return generate(SynthConfig(n_days=60, seed=3))


def make_dataset(
    n_sites: int = 3,
    n_steps: int = 40,
    seed: int = 0,
    start: str = "2020-01-01",
) -> AlignedDataset:
    rng = np.random.default_rng(seed)
    stamps = pd.date_range(start, periods=n_steps, freq="3H", tz="UTC")
    features = rng.normal(size=(n_sites, n_steps, len(FEATURES)))
    features[..., :3] = np.abs(features[..., :3]) + 1.0
    return AlignedDataset(
        site_ids=[f"S{i}" for i in range(n_sites)],
        lat=np.linspace(28.3, 28.9, n_sites),
        lon=np.linspace(76.9, 77.5, n_sites),
        timestamps=stamps,
        features=features,
    )


@pytest.fixture
def dataset() -> AlignedDataset:
    return make_dataset()


@pytest.fixture
def out_dir(tmp_path: Path) -> Path:
    return tmp_path / "out"
