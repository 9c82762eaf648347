import numpy as np
import pytest
import torch

from factorkit.models import ArchSpec, NetworkBundle
from factorkit.synthdata import generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(240, seed=3, splits={"train": 160, "val": 40, "test": 40})


@pytest.fixture(scope="session")
def mini_arch():
    return ArchSpec(image_size=8, channels=1, d_z=4, width=2, aux_hidden=4)


@pytest.fixture
def mini_bundle(mini_arch):
    bundle = NetworkBundle(mini_arch, seed=11).double()
    bundle.ready = True
    return bundle


@pytest.fixture(scope="session")
def mini_dataset():
    return generate_dataset(60, seed=5, image_size=8, channels=1, splits={"train": 40, "val": 10, "test": 10})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
