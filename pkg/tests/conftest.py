import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)

from data import Dataset, Schema  # noqa: E402
from synth import GeneratorSpec, generate  # noqa: E402


def tiny_schema(n_features=3):
    kinds = ['count', 'years', 'binary']
    flags = [['serious_prior'], ['biographical'], ['instant_charge']]
    return Schema([('x%d' % j, kinds[j % 3], flags[j % 3]) for j in range(n_features)])


def random_dataset(seed, n, n_features=3, n_classes=3, groups=('W', 'B'), integer_weights=False, n_values=6):
    """Small dataset on an integer grid so ties and repeated values are common."""
    rng = np.random.default_rng(seed)
    features = rng.integers(0, n_values, size=(n, n_features)).astype(np.float64)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    weights = rng.integers(1, 4, size=n).astype(np.float64) if integer_weights else rng.uniform(0.5, 2.0, size=n)
    return Dataset(tiny_schema(n_features), features, labels, rng.choice(list(groups), size=n), weights,
                   n_classes=n_classes)


@pytest.fixture
def schema():
    return tiny_schema()


@pytest.fixture(scope='session')
def population():
    return generate(GeneratorSpec.default(n=6000, seed=7))
