# conftest.py
from pathlib import Path

import pytest

from herl.client_profile import ClientProfile, Population
from herl.he_plan import CostModel, ParameterPlan, build_action_grid, load_he_config
from herl.fl_sim import TrainerModel

ROOT = Path(__file__).resolve().parent


def make_client(cid, speed=1.0, bandwidth=5e7, data_size=100, security=128, train=4.0):
    return ClientProfile(
        id=cid,
        compute_speed=speed,
        bandwidth=bandwidth,
        data_size=data_size,
        security_req=security,
        base_train_time=train,
    )


@pytest.fixture
def he_config():
    return load_he_config()


@pytest.fixture
def table(he_config):
    return he_config[0]


@pytest.fixture
def cost(he_config):
    return he_config[1]


@pytest.fixture
def default_cost():
    return CostModel()


@pytest.fixture
def grid(table):
    return build_action_grid([13, 14, 15], [60, 100, 150, 200, 300], table)


@pytest.fixture
def low_plan():
    return ParameterPlan(log_n=13, q_bits=100)


@pytest.fixture
def high_plan():
    return ParameterPlan(log_n=14, q_bits=200)


@pytest.fixture
def small_population():
    """Twelve clients: speeds spread 0.2..2.0, requirements cycling 128/192/256."""
    clients = [
        make_client(i, speed=0.2 + 0.15 * i, bandwidth=5e6 * (1 + i), security=(128, 192, 256)[i % 3], data_size=50 + 10 * i)
        for i in range(12)
    ]
    return Population(clients=clients, seed=0)


@pytest.fixture
def quiet_trainer():
    return TrainerModel(a_max=0.8, rate=0.1, noise_sd=0.0, heterogeneity_sd=0.0)


@pytest.fixture
def trace_file(tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text(
        "compute_speed,bandwidth_bps,base_train_time_s\n"
        "1.0,50000000,4.0\n"
        "0.5,10000000,6.0\n"
        "0.2,5000000,4.0\n"
        "2.0,40000000,2.0\n",
        encoding="utf-8",
    )
    return path
