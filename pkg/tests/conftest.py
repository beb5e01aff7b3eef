import numpy as np
import pytest

from madkit.arch import ArchDescriptor, Conv2d, Dense, Flatten, MaxPool, Relu
from madkit import engine
from madkit.data import LabeledSample


@pytest.fixture
def mlp_arch():
    # 51 parameters: the finite-difference oracle target
    return ArchDescriptor(
        (Flatten(), Dense(4, 6), Relu(), Dense(6, 3)),
        input_shape=(2, 2, 1), classes=3,
    )


@pytest.fixture
def conv_arch():
    # 47 parameters, exercises every layer type
    return ArchDescriptor(
        (Conv2d(1, 2, 3), Relu(), MaxPool(2), Flatten(), Dense(8, 3)),
        input_shape=(6, 6, 1), classes=3,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_batch(rng, arch, n):
    inputs = rng.uniform(0.0, 1.0, size=(n,) + arch.input_shape)
    labels = rng.integers(0, arch.classes, size=n)
    return [LabeledSample(inputs[i], int(labels[i]), sample_id=f"s{i:03d}")
            for i in range(n)]


@pytest.fixture
def batch_factory():
    return make_batch
