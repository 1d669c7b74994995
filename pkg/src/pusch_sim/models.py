"""Plain data models shared by the simulation layers, and the cache."""
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import diskcache

CACHE_PATH_ENV_VAR = 'PUSCHSIM_CACHE_DIR'
NO_CACHE_ENV_VAR = 'PUSCHSIM_NO_CACHE'
#: https://specifications.freedesktop.org/basedir-spec/basedir-spec-latest.html
#: According to freedesktop spec, this is where non-essential data goes.
XDG_CACHE_ENV_VAR = 'XDG_CACHE_HOME'

_cache = None


def get_cache_path():
    """Get the filesystem path where precomputed code matrices are kept."""
    if cache_path := os.getenv(CACHE_PATH_ENV_VAR):
        cache_path = Path(cache_path)
    elif xdg_home := os.getenv(XDG_CACHE_ENV_VAR):
        cache_path = Path(xdg_home) / 'puschsim'
    else:
        cache_path = Path(os.path.expanduser('~'), '.cache', 'puschsim')

    cache_path.mkdir(parents=True, exist_ok=True)
    return cache_path


def get_cache():
    """Return the process-wide disk cache, or None when it is disabled."""
    global _cache
    if os.getenv(NO_CACHE_ENV_VAR):
        return None
    if _cache is None:
        _cache = diskcache.Cache(str(get_cache_path()))
    return _cache


@dataclass(frozen=True)
class McsEntry:
    """One row of the modulation and coding table used by the sweeps."""

    index: int
    modulation: str
    bits_per_symbol: int
    target_rate: float
    tbs: int


@dataclass
class SimConfig:
    """Everything one sweep needs. Field names are the config-file keys.

    The defaults reproduce the reference profile: 30 kHz subcarriers,
    2048-point FFT, 106 PRBs, two layers on a 2x2 link, DMRS on symbols
    2 and 11, a 153-tap transmit filter and a TDLA30 channel.
    """

    mu: int = 1
    n_fft: int = 2048
    bandwidth_hz: float = 40e6
    n_prb: int = 106
    n_layers: int = 2
    n_rx: int = 2
    first_symbol: int = 0
    n_symbols: int = 13
    dmrs_symbols: tuple = (2, 11)
    dmrs_spacing: int = 2
    scrambling_id: int = 0
    slot_number: int = 0
    mcs_index: int = 0
    #: Overrides the table TBS when set; used for reduced allocations.
    tbs: int | None = None
    filter_taps: int = 153
    tx_filter: bool = True
    #: 'AWGN' or the name of a packaged TDL profile.
    channel: str = 'TDLA30'
    doppler_hz: float = 300.0
    cfo_hz: float = 0.0
    sto_samples: int = 0
    snr_start_db: float = 0.0
    snr_stop_db: float = 20.0
    snr_step_db: float = 2.0
    trials: int = 1000
    max_block_errors: int = 100
    seed: int = 0
    max_iters: int = 20
    decoder_mode: str = 'two_piece'
    estimator: str = 'MMSE'
    genie: bool = False
    sync: bool = False
    record_timing: bool = True

    @property
    def numerology(self):
        from .waveform import Numerology

        return Numerology(mu=self.mu, n_fft=self.n_fft)

    @property
    def pusch(self):
        from .waveform import PuschConfig

        return PuschConfig(
            n_prb=self.n_prb,
            n_layers=self.n_layers,
            first_symbol=self.first_symbol,
            n_symbols=self.n_symbols,
            dmrs_symbols=tuple(self.dmrs_symbols),
            dmrs_spacing=self.dmrs_spacing,
            scrambling_id=self.scrambling_id,
            slot_number=self.slot_number,
        )

    def snr_points(self):
        """SNR grid of the sweep, inclusive of the stop value."""
        if self.snr_step_db <= 0:
            return [self.snr_start_db]
        count = int(
            round((self.snr_stop_db - self.snr_start_db) / self.snr_step_db)
        )
        return [
            round(self.snr_start_db + i * self.snr_step_db, 6)
            for i in range(max(count, 0) + 1)
        ]

    def replace(self, **changes):
        values = asdict(self)
        values.update(changes)
        return SimConfig(**values)

    def echo(self):
        """``key = value`` lines, in field order, for report headers."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (tuple, list)):
                value = ','.join(str(v) for v in value)
            lines.append(f'{f.name} = {value}')
        return lines


@dataclass
class SimPoint:
    """One row of a sweep report."""

    snr_db: float
    blocks: int
    block_errors: int
    bler: float
    ber_pre: float
    ber_post: float
    evm_pct: float
    mean_iters: float
    elapsed_s: float


@dataclass
class SimReport:
    config: SimConfig
    rows: list = field(default_factory=list)
    #: Asset name -> SHA-256 of every data file the run depended on.
    checksums: dict = field(default_factory=dict)
    max_iters: int = 20
