import numpy as np
import pytest

from nh2st.config import TrainConfig
from nh2st.data import SynthConfig, knn_table, synth_generate
from nh2st.model import init_params, make_batch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds():
    return synth_generate(SynthConfig(grid=4, P=32, n=8, sigma=0.05), seed=0)


@pytest.fixture(scope="session")
def small_cfg():
    return TrainConfig(N=16, P=32, n=8, T=4, K=4, L=2, tau_deg=3, batch_size=4, seed=0)


@pytest.fixture(scope="session")
def small_batch(small_ds, small_cfg):
    return make_batch(small_ds, [0, 5, 10, 15], knn_table(small_ds, small_cfg.K))


@pytest.fixture
def small_params(small_cfg):
    return init_params(small_cfg)
