import numpy as np
import pytest
import torch

from dits.data import normalize
from dits.envs import synthesize_offline_dataset
from dits.models import (GaussianDynamicsEnsemble, InverseDynamicsModel,
                         ModelBundle, TwinValueFunction)

from helpers import fit_chain_diffuser

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def chain_expert_raw():
    return synthesize_offline_dataset("chain1d", "expert", 40, seed=3)


@pytest.fixture(scope="session")
def chain_data_raw():
    """Random-tier chain data: increments cover [-1, 1] uniformly."""
    return synthesize_offline_dataset("chain1d", "random", 40, seed=4)


@pytest.fixture(scope="session")
def chain_expert_norm(chain_expert_raw):
    return normalize(chain_expert_raw, horizon=8, gamma=0.99)


@pytest.fixture(scope="session")
def chain_data_norm(chain_data_raw):
    return normalize(chain_data_raw, horizon=8, gamma=0.99)


@pytest.fixture(scope="session")
def chain_diffuser(chain_expert_norm):
    """Diffuser over expert chain windows (constant unit rewards)."""
    return fit_chain_diffuser(chain_expert_norm)


@pytest.fixture(scope="session")
def chain_data_diffuser(chain_data_norm):
    return fit_chain_diffuser(chain_data_norm)


@pytest.fixture(scope="session")
def chain_pair_diffuser_trained(chain_data_norm):
    return fit_chain_diffuser(chain_data_norm, pair=True)


@pytest.fixture(scope="session")
def chain_idm(chain_data_norm):
    return InverseDynamicsModel(hidden=(64, 64), steps=2500,
                                seed=0).fit(chain_data_norm)


@pytest.fixture(scope="session")
def chain_bundle(chain_data_norm, chain_data_diffuser, chain_idm):
    ensemble = GaussianDynamicsEnsemble(
        n_members=3, n_select=2, hidden=(64, 64), steps=800,
        seed=0).fit(chain_data_norm)
    value = TwinValueFunction(hidden=(64, 64), gamma=0.99, steps=600,
                              seed=0).fit(chain_data_norm)
    return ModelBundle(chain_data_norm.norm_stats, chain_idm, ensemble,
                       value, chain_data_diffuser)
