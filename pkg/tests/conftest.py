import numpy as np
import pytest

from fedemd.data import Minibatch
from fedemd.errors import reset_warning_counters
from fedemd.model import ArchSpec, FeatureMap, ModelWeights


@pytest.fixture(autouse=True)
def _clean_warning_counters():
    reset_warning_counters()
    yield
    reset_warning_counters()


def tiny_arch(embed_dim=4, n_classes=3, side=4, patch=2) -> ArchSpec:
    return ArchSpec(image_side=side, patch_size=patch, embed_dim=embed_dim,
                    n_classes=n_classes)


def random_weights(arch: ArchSpec, seed: int) -> ModelWeights:
    return ModelWeights.initialize(arch, seed)


def random_batch(rng: np.random.Generator, arch: ArchSpec, batch_size=3) -> Minibatch:
    return Minibatch(
        images=rng.normal(size=(batch_size, arch.image_side, arch.image_side)),
        labels=rng.integers(0, arch.n_classes, size=batch_size),
    )


def feature_map(values) -> FeatureMap:
    values = np.asarray(values, dtype=np.float64)
    return FeatureMap(1, values.shape[0], values)
