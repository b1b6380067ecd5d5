import pytest
import torch

from prism.data_synth import DatasetConfig, build_dataset, default_skeleton


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(DatasetConfig(clips_per_family=4, frames=32))


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)
