from typing import Callable, Tuple

import numpy as np
import pytest
import torch

from src.config import TrainConfig
from src.geometry import DTYPE, exp_map, origin


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded numpy generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def generator() -> torch.Generator:
    """Seeded torch generator."""
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def random_points(generator: torch.Generator) -> Callable[..., torch.Tensor]:
    """Factory of points lifted from random tangent vectors at the origin."""

    def make(n: int, d: int, theta: float = 1.0, scale: float = 1.0) -> torch.Tensor:
        spatial = torch.randn((n, d), generator=generator, dtype=DTYPE) * scale
        tangent = torch.cat([torch.zeros((n, 1), dtype=DTYPE), spatial], dim=-1)
        return exp_map(origin(d, theta).expand(n, d + 1), tangent, theta)

    return make


@pytest.fixture(scope='session')
def clusters() -> Callable[..., Tuple[np.ndarray, np.ndarray]]:
    """Factory of Gaussian blobs: features and the blob of every item."""

    def make(n: int, dim: int, k: int, seed: int = 0, spread: float = 0.1, scale: float = 5.0):
        rng = np.random.default_rng(seed)
        centers = rng.normal(size=(k, dim)) * scale
        labels = np.arange(n) % k
        features = centers[labels] + rng.normal(size=(n, dim)) * spread
        return features, labels

    return make


@pytest.fixture
def tiny_config() -> TrainConfig:
    """Small configuration that trains in a few seconds."""
    return TrainConfig(
        batch_size=16,
        epochs=2,
        lr_start=0.01,
        lr_end=0.001,
        M=2,
        K=4,
        d=3,
        levels=(8, 4),
        kmeans_iters=5,
        seed=7,
    )
