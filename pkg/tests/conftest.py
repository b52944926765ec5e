import numpy as np
import pytest
import torch

from fraggrade.data import PhantomConfig, build_split
from fraggrade.model import FragmentNet, ModelConfig


def central_difference(f, tensor, index, h=1e-6):
    """d f / d tensor[index] by central differences, perturbing in place."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = float(f())
        tensor[index] = orig - h
        down = float(f())
        tensor[index] = orig
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def toy_model_double():
    torch.manual_seed(0)
    m = FragmentNet(ModelConfig()).double()
    m.eval()
    return m


@pytest.fixture(scope="session")
def small_split():
    return build_split(12, 12, 4, PhantomConfig(image_size=96, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
