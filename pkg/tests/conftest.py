import numpy as np
import pytest

from pusch_sim import ldpc
from pusch_sim.models import SimConfig


@pytest.fixture(autouse=True)
def no_disk_cache(monkeypatch, tmp_path):
    """Keep the user's cache directory out of the test run."""
    monkeypatch.setenv('PUSCHSIM_CACHE_DIR', str(tmp_path / 'cache'))
    monkeypatch.setenv('PUSCHSIM_NO_CACHE', '1')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy():
    return ldpc.toy_code()


@pytest.fixture
def small_cfg():
    """A narrow, fast link: 4 PRBs, 128-point FFT, one short block."""
    return SimConfig(
        n_fft=128,
        bandwidth_hz=2.4e6,
        n_prb=4,
        tbs=200,
        filter_taps=31,
        tx_filter=False,
        channel='AWGN',
        snr_start_db=10.0,
        snr_stop_db=12.0,
        snr_step_db=2.0,
        trials=4,
        max_block_errors=100,
        seed=7,
        record_timing=False,
    )
