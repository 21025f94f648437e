import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(0)


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)
