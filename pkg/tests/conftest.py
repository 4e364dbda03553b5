import numpy as np
import pytest

from fedwrap.data import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def make_blobs(n_per_class: int = 20, n_classes: int = 2, dim: int = 2, sep: float = 6.0, seed: int = 0) -> Dataset:
    """Linearly separable Gaussian blobs, one per class."""
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for c in range(n_classes):
        center = np.zeros(dim)
        center[c % dim] = sep * (1 + c // dim)
        feats.append(rng.normal(center, 0.5, size=(n_per_class, dim)))
        labels.append(np.full(n_per_class, c))
    return Dataset(
        features=np.vstack(feats),
        labels=np.concatenate(labels),
        n_classes=n_classes,
        feature_names=[f"f{i}" for i in range(dim)],
    )


def random_dataset(rng, n_rows: int, dim: int, n_classes: int) -> Dataset:
    return Dataset(
        features=rng.normal(size=(n_rows, dim)),
        labels=rng.integers(0, n_classes, size=n_rows),
        n_classes=n_classes,
        feature_names=[f"f{i}" for i in range(dim)],
    )
