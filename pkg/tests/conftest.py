import numpy as np
import pytest

from basslab.model import BassParams, HeteroSpec

FIG3_A = [0.4, 0.1, 0.3, 0.2]
FIG3_P = [0.0, 0.02, 0.04, 0.01]
# row m is the influencing group, column k the influenced one
FIG3_Q = [[0.1, 0.05, 0.01, 0.0],
          [0.05, 0.025, 0.08, 0.05],
          [0.01, 0.02, 0.03, 0.04],
          [0.15, 0.05, 0.05, 0.05]]


@pytest.fixture
def fig1_params():
    return BassParams(0.02, 0.1)


@pytest.fixture
def fig2_params():
    return BassParams(0.02, 0.11)


@pytest.fixture
def fig3_spec():
    return HeteroSpec(FIG3_A, FIG3_P, FIG3_Q)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
