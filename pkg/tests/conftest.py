import numpy as np
import pytest

from meanflow_dance.kinematics import toy_skeleton
from meanflow_dance.network import NetworkConfig, VelocityNet

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def skel():
    return toy_skeleton()


@pytest.fixture(scope="session")
def tiny_cfg(skel):
    return NetworkConfig(latent_dim=8, d_state=2, conv_kernel=3, expand=2, cond_layers=1,
                         gen_blocks=1, motion_dim=skel.motion_dim, genre_count=16)


@pytest.fixture
def tiny_net(tiny_cfg):
    return VelocityNet(tiny_cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
