import pytest

import torch

from crateseg.config import ModelConfig
from crateseg.data import SynthDataConfig, generate_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs (select with -m slow)")


def pytest_collection_modifyitems(config, items):
    if "slow" in (config.getoption("-m") or ""):
        return
    skip_slow = pytest.mark.skip(reason="slow test, run with -m slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    """d=8, p=4, K=2, L=2 on 8x8 images with 4x4 patches (N=4), 3 classes"""
    return ModelConfig(
        num_layers=2,
        model_dim=8,
        num_heads=2,
        head_dim=4,
        image_shape=(3, 8, 8),
        patch_shape=(4, 4),
        num_classes=3,
        mlp_hidden=16,
    )


@pytest.fixture
def tiny_data_config():
    return SynthDataConfig(num_classes=3, image_size=8, patch_size=4, min_area=0.2, max_area=0.6)


@pytest.fixture
def tiny_samples(tiny_data_config):
    return generate_dataset(tiny_data_config, 6)


@pytest.fixture(autouse=True)
def single_thread():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)
