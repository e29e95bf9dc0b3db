import numpy as np
import pytest

from ntksel.toy_model import ToyNetwork


@pytest.fixture(scope="session")
def default_net() -> ToyNetwork:
    return ToyNetwork.random(seed=0)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
