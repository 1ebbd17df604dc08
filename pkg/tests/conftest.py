import numpy as np
import pytest

from lidfl import Batch, DatasetConfig, ModelSpec, derive_stream, generate


@pytest.fixture
def softmax_spec():
    return ModelSpec("softmax-regression", input_dim=4, n_classes=3, l2=0.01)


@pytest.fixture
def mlp_spec():
    return ModelSpec("mlp", input_dim=4, n_classes=3, hidden=5, l2=0.01)


@pytest.fixture
def small_batch():
    gen = np.random.default_rng(123)
    x = gen.standard_normal((40, 4))
    y = gen.integers(3, size=40)
    return Batch(x, y)


@pytest.fixture
def mixture_batch():
    cfg = DatasetConfig(n=300, input_dim=4, n_classes=3, separation=5.0, noise_sigma=0.8)
    return generate(cfg, derive_stream(11, "data"))
