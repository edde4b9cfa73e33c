import pytest
import torch

from src.problems import make_problem
from src.surrogate import ClosedFormField, MLPField, NetworkConfig


@pytest.fixture
def small_config():
    return NetworkConfig(d=2, hidden_layers=2, width=8, activation='mish', init_seed=3, precision='float64')


@pytest.fixture
def bsb2():
    return make_problem('BSB', d_override=2)


@pytest.fixture
def hjb2():
    return make_problem('HJB', d_override=2)


@pytest.fixture
def net(small_config):
    return MLPField(small_config, 1.0)


@pytest.fixture
def bsb_exact(bsb2):
    return ClosedFormField.from_problem(bsb2)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(11)
