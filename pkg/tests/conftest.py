import numpy as np
import pytest

from mixsim.design import gen_complex_design, gen_simple_design, model_matrices, SimpleDesignConfig
from mixsim.stochastic import RngStream
from mixsim.truemodel import generate_response, realize, sample_true_complex, sample_true_simple


def make_complex(family, seed=1, sim_id=1):
    rng = RngStream(seed, sim_id)
    ds = gen_complex_design(rng)
    mm = model_matrices(ds)
    truth = realize(sample_true_complex(family, rng), mm, rng)
    return ds, mm, truth, generate_response(mm, truth, rng)


def make_simple(family, seed=1, sim_id=1, n_items=12, manipulation="within_item"):
    rng = RngStream(seed, sim_id)
    cfg = SimpleDesignConfig(n_items=n_items, item_manipulation=manipulation)
    ds = gen_simple_design(cfg, rng)
    mm = model_matrices(ds)
    truth = realize(sample_true_simple(family, False, cfg.item_manipulation, rng), mm, rng)
    return ds, mm, truth, generate_response(mm, truth, rng)


@pytest.fixture(scope="session")
def complex_gaussian():
    return make_complex("gaussian")


@pytest.fixture(scope="session")
def complex_logistic():
    return make_complex("logistic")


@pytest.fixture
def gen():
    return np.random.default_rng(12345)
