import numpy as np
import pytest

from sidelinksim.channel import (ChannelConfig, ImpairmentConfig,
                                 PowerCalibration)
from sidelinksim.grid import Allocation, GridConfig
from sidelinksim.link import LinkConfig
from sidelinksim.phy_tx import OfdmConfig


@pytest.fixture
def cfg6():
    return GridConfig(n_subchannels=6)


@pytest.fixture
def cfg1():
    return GridConfig(n_subchannels=1)


@pytest.fixture
def ofdm():
    return OfdmConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_link(grid_cfg, alloc, model="awgn", ofdm_cfg=None, gain_offset=17.0,
              cfo_hz=0.0, channel_cfg=None, correct_cfo=True):
    return LinkConfig(
        grid=grid_cfg,
        ofdm=ofdm_cfg or OfdmConfig(),
        channel=channel_cfg or ChannelConfig(model=model),
        impairments=ImpairmentConfig(cfo_hz=cfo_hz),
        calibration=PowerCalibration(gain_offset_db=gain_offset),
        alloc=alloc,
        correct_cfo=correct_cfo,
    )


@pytest.fixture
def awgn_link6(cfg6):
    return make_link(cfg6, Allocation(0, 6))


@pytest.fixture
def ideal_link6(cfg6):
    return make_link(cfg6, Allocation(0, 6), model="ideal")
