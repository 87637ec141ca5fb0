import numpy as np
import pytest
import torch

from fecosr.encoder import EncoderConfig, init_params
from fecosr.pipeline import Dataset
from fecosr.syngen import SynConfig, generate_universe

TINY_SYN = SynConfig(num_markets=2, items_per_market=30, users_per_market=40, num_clusters=5, dim=16, seed=3)
TINY_ENC = EncoderConfig(dim=16, max_len=20, num_blocks=1, num_heads=2, dropout=0.2)


@pytest.fixture(scope="session")
def tiny_universe():
    return generate_universe(TINY_SYN)


@pytest.fixture(scope="session")
def tiny_data(tiny_universe):
    return Dataset.from_universe(tiny_universe)


@pytest.fixture
def tiny_enc():
    return TINY_ENC


@pytest.fixture
def toy():
    """d=4, one block, three items, float64 for finite differences."""
    cfg = EncoderConfig(dim=4, max_len=5, num_blocks=1, num_heads=2, dropout=0.0)
    params = init_params(cfg, seed=11).to(torch.float64)
    gen = torch.Generator().manual_seed(5)
    for name, t in params.tensors.items():
        if "ln" in name or name.endswith(("b1", "b2")):
            # move norms and biases off their trivial init so every entry is exercised
            t.add_(0.1 * torch.randn(t.shape, generator=gen, dtype=torch.float64))
    table = torch.from_numpy(np.random.default_rng(0).standard_normal((3, 4)))
    table = table / table.norm(dim=1, keepdim=True)
    return cfg, params, table


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
