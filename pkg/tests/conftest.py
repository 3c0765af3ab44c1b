import numpy as np
import pytest

from wildood.heads import TrainConfig, apply_heads, train_heads
from wildood.prototypes import build_knn_index, fit_class_means
from wildood.scorers import Artifacts
from wildood.synthgen import SynthConfig, gen_gaussian_benchmark

SEPARATED = SynthConfig(class_sep=20.0, noise_sigma=0.5, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_table():
    cfg = SynthConfig(dim=4, per_class=(8, 6, 6), ood_per_cluster=(3, 4), seed=3)
    return gen_gaussian_benchmark(cfg)


@pytest.fixture(scope="session")
def separated_table():
    return gen_gaussian_benchmark(SEPARATED)


@pytest.fixture(scope="session")
def separated_heads(separated_table):
    return train_heads(separated_table, TrainConfig(max_epochs=30, hidden=64, seed=0))


@pytest.fixture(scope="session")
def separated_artifacts(separated_table, separated_heads):
    projected = apply_heads(separated_table, separated_heads)
    return Artifacts(
        protos=fit_class_means(separated_table, "val", "raw"),
        knn_index=build_knn_index(separated_table, "val", "raw", "unit_l2"),
        contrastive_index=build_knn_index(projected, "val", "projected", "unit_l2"),
        heads=separated_heads,
    )
