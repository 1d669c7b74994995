"""Transmit-side physical layer: scrambling, modulation, resource grid
and CP-OFDM with the optional band-limiting filter.

Grids are stored port-major, ``values[port, symbol, subcarrier]``. The
allocation occupies ``12 * n_prb`` subcarriers centred on DC; subcarrier
``kappa`` of the grid sits on FFT bin ``kappa - 6 * n_prb``.
"""
import functools
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np
from scipy import signal

from .debug import log
from .errors import ConfigurationError, LengthMismatchError, SignalError

SUBCARRIERS_PER_PRB = 12
SYMBOLS_PER_SLOT = 14
BASE_SCS_HZ = 15e3
#: Symbols of a slot whose cyclic prefix is the long one.
LONG_CP_SYMBOLS = (0, 7)
#: Warm-up length of the Gold sequence generator.
GOLD_NC = 1600
IQ_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Numerology:
    """Subcarrier spacing family ``15 kHz * 2**mu`` and its FFT size."""

    mu: int
    n_fft: int

    def __post_init__(self):
        if self.mu < 0:
            raise ConfigurationError(f'mu must be >= 0, got {self.mu}')
        if self.n_fft < 128 or self.n_fft % 128:
            raise ConfigurationError(
                f'n_fft must be a positive multiple of 128, got {self.n_fft}'
            )

    @property
    def subcarrier_spacing(self):
        return BASE_SCS_HZ * 2**self.mu

    @property
    def sample_rate(self):
        return self.subcarrier_spacing * self.n_fft

    @property
    def slot_duration(self):
        """Nominal slot duration in seconds."""
        return 1e-3 / 2**self.mu

    @property
    def slots_per_subframe(self):
        return 2**self.mu

    @property
    def symbol_duration(self):
        """Useful OFDM symbol duration, without the cyclic prefix."""
        return 1.0 / self.subcarrier_spacing

    @property
    def short_cp(self):
        return 144 * self.n_fft // 2048

    @property
    def long_cp(self):
        return self.short_cp + 16 * 2**self.mu * self.n_fft // 2048

    @property
    def cp_lengths(self):
        return tuple(
            self.long_cp if l in LONG_CP_SYMBOLS else self.short_cp
            for l in range(SYMBOLS_PER_SLOT)
        )

    @property
    def symbol_starts(self):
        """Sample index where each symbol's cyclic prefix begins."""
        lengths = [cp + self.n_fft for cp in self.cp_lengths]
        return tuple(int(s) for s in np.cumsum([0] + lengths[:-1]))

    @property
    def slot_samples(self):
        return sum(self.cp_lengths) + SYMBOLS_PER_SLOT * self.n_fft


@dataclass(frozen=True)
class PuschConfig:
    """Allocation of one slot.

    Symbols ``first_symbol .. first_symbol + n_symbols - 1`` are
    allocated; the ones listed in ``dmrs_symbols`` carry reference
    signals only, the others carry data on every subcarrier.
    """

    n_prb: int
    n_layers: int = 2
    first_symbol: int = 0
    n_symbols: int = 13
    dmrs_symbols: tuple = (2, 11)
    dmrs_spacing: int = 2
    scrambling_id: int = 0
    slot_number: int = 0
    rnti: int = 0

    def __post_init__(self):
        if self.n_prb < 1:
            raise ConfigurationError('n_prb must be positive')
        if self.n_layers not in (1, 2):
            raise ConfigurationError('one or two layers are supported')
        if self.dmrs_spacing not in (2, 3):
            raise ConfigurationError('DMRS comb spacing must be 2 or 3')
        if not 1 <= len(self.dmrs_symbols) <= 4:
            raise ConfigurationError('a slot carries 1 to 4 DMRS symbols')
        if len(set(self.dmrs_symbols)) != len(self.dmrs_symbols):
            raise ConfigurationError('duplicate DMRS symbol')
        last = self.first_symbol + self.n_symbols
        if self.first_symbol < 0 or last > SYMBOLS_PER_SLOT:
            raise ConfigurationError('allocation exceeds the slot')
        if any(not self.first_symbol <= l < last for l in self.dmrs_symbols):
            raise ConfigurationError('DMRS symbol outside the allocation')
        if not self.data_symbols:
            raise ConfigurationError('allocation has no data symbols')

    @property
    def n_sc(self):
        return SUBCARRIERS_PER_PRB * self.n_prb

    @property
    def first_prb(self):
        """Allocation start in PRBs relative to the DC subcarrier."""
        return int(subcarrier_offsets(self.n_sc)[0]) // SUBCARRIERS_PER_PRB

    @property
    def data_symbols(self):
        return tuple(
            l
            for l in range(
                self.first_symbol, self.first_symbol + self.n_symbols
            )
            if l not in self.dmrs_symbols
        )

    @property
    def data_re_per_layer(self):
        return len(self.data_symbols) * self.n_sc

    def coded_bits(self, q_m):
        """Codeword length the allocation carries at ``q_m`` bits/symbol."""
        return self.n_layers * self.data_re_per_layer * q_m

    def pilot_positions(self, port):
        """Subcarriers carrying the DMRS of ``port`` on a DMRS symbol."""
        return np.arange(port, self.n_sc, self.dmrs_spacing)

    def check(self, numerology):
        if self.n_sc > numerology.n_fft:
            raise ConfigurationError(
                f'{self.n_sc} subcarriers exceed N_fft={numerology.n_fft}'
            )


class REKind(IntEnum):
    EMPTY = 0
    DATA = 1
    DMRS = 2


@dataclass
class ResourceGrid:
    """Complex grid ``values[port, symbol, subcarrier]``.

    Transmit grids carry ``kinds``; demodulated grids carry the sample
    index of each symbol's FFT window instead.
    """

    values: np.ndarray
    kinds: np.ndarray | None = None
    window_starts: np.ndarray | None = None

    @property
    def n_ports(self):
        return self.values.shape[0]

    @property
    def n_sc(self):
        return self.values.shape[-1]


@dataclass
class TimeSignal:
    """Baseband samples ``samples[antenna, n]``.

    ``delay`` counts the samples by which filtering has delayed the slot
    start; the demodulator skips them.
    """

    samples: np.ndarray
    sample_rate: float
    delay: int = 0
    #: Per-antenna noise variance, set once noise has been added.
    noise_var: np.ndarray | None = None

    @property
    def n_antennas(self):
        return self.samples.shape[0]

    def mean_power(self, axis=None):
        return np.mean(np.abs(self.samples) ** 2, axis=axis)


class Modulation(Enum):
    QPSK = 2
    QAM16 = 4
    QAM64 = 6

    @property
    def bits_per_symbol(self):
        return self.value

    @classmethod
    def from_name(cls, name):
        names = {'QPSK': cls.QPSK, '16QAM': cls.QAM16, '64QAM': cls.QAM64}
        try:
            return names[name.upper()]
        except KeyError:
            raise ConfigurationError(f'unknown modulation {name!r}') from None

    @property
    def pam_levels(self):
        """Amplitude of each per-axis bit pattern, unnormalised.

        Index ``i`` is the pattern whose bits (MSB first) are the even
        (real axis) or odd (imaginary axis) bits of a symbol.
        """
        half = self.value // 2
        bits = (np.arange(2**half)[:, None] >> np.arange(half)[::-1]) & 1
        s = 1 - 2 * bits.astype(np.float64)
        if half == 1:
            return s[:, 0]
        if half == 2:
            return s[:, 0] * (2 - s[:, 1])
        return s[:, 0] * (4 - s[:, 1] * (2 - s[:, 2]))

    @property
    def scale(self):
        return 1.0 / math.sqrt({2: 2, 4: 10, 6: 42}[self.value])

    @property
    def constellation(self):
        """Unit-energy points indexed by the symbol's bits, MSB first."""
        return _constellation(self)


@functools.lru_cache(maxsize=None)
def _constellation(modulation):
    q = modulation.value
    idx = np.arange(2**q)
    bits = (idx[:, None] >> np.arange(q)[::-1]) & 1
    weights = 2 ** np.arange(q // 2)[::-1]
    re = bits[:, 0::2] @ weights
    im = bits[:, 1::2] @ weights
    levels = modulation.pam_levels
    return (levels[re] + 1j * levels[im]) * modulation.scale


def gold_sequence(c_init, length):
    """Length-31 Gold sequence with the standard 1600-sample warm-up.

    Both shift registers advance 28 steps per numpy operation, the
    largest step for which every tap is already known.
    """
    total = GOLD_NC + length
    x1 = np.zeros(total + 31, dtype=np.uint8)
    x2 = np.zeros(total + 31, dtype=np.uint8)
    x1[0] = 1
    x2[:31] = (int(c_init) >> np.arange(31)) & 1
    for i in range(0, total, 28):
        j = min(i + 28, total)
        x1[i + 31 : j + 31] = x1[i + 3 : j + 3] ^ x1[i:j]
        x2[i + 31 : j + 31] = (
            x2[i + 3 : j + 3] ^ x2[i + 2 : j + 2] ^ x2[i + 1 : j + 1] ^ x2[i:j]
        )
    return x1[GOLD_NC:total] ^ x2[GOLD_NC:total]


def dmrs_c_init(slot, symbol, scrambling_id):
    return (
        2**17
        * (SYMBOLS_PER_SLOT * slot + symbol + 1)
        * (2 * scrambling_id + 1)
        + 2 * scrambling_id
    ) % 2**31


def data_c_init(cfg):
    return cfg.rnti * 2**15 + cfg.scrambling_id


def scramble(bits, c_init):
    """XOR ``bits`` with the Gold sequence seeded by ``c_init``."""
    bits = np.asarray(bits, dtype=np.uint8)
    return bits ^ gold_sequence(c_init, bits.size)


def descramble_llr(llr, c_init):
    """Soft counterpart of :func:`scramble`: flip the sign of LLRs."""
    llr = np.asarray(llr, dtype=np.float64)
    c = gold_sequence(c_init, llr.size)
    return llr * (1.0 - 2.0 * c)


def map_symbols(bits, modulation):
    modulation = (
        Modulation.from_name(modulation)
        if isinstance(modulation, str)
        else Modulation(modulation)
    )
    bits = np.asarray(bits, dtype=np.int64)
    q = modulation.bits_per_symbol
    if bits.size % q:
        raise LengthMismatchError(
            f'{bits.size} bits is not a multiple of Q_m={q}'
        )
    idx = bits.reshape(-1, q) @ (2 ** np.arange(q)[::-1])
    return modulation.constellation[idx]


@dataclass
class DmrsPattern:
    """Pilot layout of a slot.

    ``values[port, i]`` are the pilots on DMRS symbol ``symbols[i]``, at
    subcarriers ``positions[port]``.
    """

    symbols: tuple
    positions: list
    values: np.ndarray


def dmrs_sequence(cfg, symbol):
    n_pilots = cfg.n_sc // cfg.dmrs_spacing
    c = gold_sequence(
        dmrs_c_init(cfg.slot_number, symbol, cfg.scrambling_id),
        2 * n_pilots,
    ).astype(np.float64)
    return ((1 - 2 * c[0::2]) + 1j * (1 - 2 * c[1::2])) / math.sqrt(2)


def generate_dmrs(cfg):
    positions = [cfg.pilot_positions(p) for p in range(cfg.n_layers)]
    per_symbol = [dmrs_sequence(cfg, l) for l in cfg.dmrs_symbols]
    values = np.stack(
        [
            np.stack([seq[: positions[p].size] for seq in per_symbol])
            for p in range(cfg.n_layers)
        ]
    )
    return DmrsPattern(tuple(cfg.dmrs_symbols), positions, values)


def codeword_to_layers(symbols, cfg):
    """Alternate codeword symbols over the layers and shape them per grid.

    :returns: ``(n_layers, n_data_symbols, n_sc)``.
    """
    symbols = np.asarray(symbols)
    expected = cfg.n_layers * cfg.data_re_per_layer
    if symbols.shape[0] != expected:
        raise LengthMismatchError(
            f'allocation carries {expected} symbols, got {symbols.shape[0]}'
        )
    tail = symbols.shape[1:]
    layers = symbols.reshape((cfg.data_re_per_layer, cfg.n_layers) + tail)
    layers = np.moveaxis(layers, 1, 0)
    return layers.reshape(
        (cfg.n_layers, len(cfg.data_symbols), cfg.n_sc) + tail
    )


def layers_to_codeword(layers):
    """Inverse of :func:`codeword_to_layers`.

    Trailing axes (for example bits per symbol) follow the symbols.
    """
    layers = np.asarray(layers)
    n_layers = layers.shape[0]
    tail = layers.shape[3:]
    flat = layers.reshape((n_layers, -1) + tail)
    return np.moveaxis(flat, 0, 1).reshape((-1,) + tail)


def build_grid(symbols, cfg, dmrs=None):
    """Place data and DMRS on the per-port grid."""
    dmrs = dmrs or generate_dmrs(cfg)
    shape = (cfg.n_layers, SYMBOLS_PER_SLOT, cfg.n_sc)
    values = np.zeros(shape, dtype=np.complex128)
    kinds = np.full(shape, REKind.EMPTY, dtype=np.uint8)
    data = list(cfg.data_symbols)
    values[:, data, :] = codeword_to_layers(symbols, cfg)
    kinds[:, data, :] = REKind.DATA
    for i, l in enumerate(dmrs.symbols):
        for p in range(cfg.n_layers):
            values[p, l, dmrs.positions[p]] = dmrs.values[p, i]
            kinds[p, l, dmrs.positions[p]] = REKind.DMRS
    return ResourceGrid(values=values, kinds=kinds)


def extract_data(grid, cfg):
    """Data symbols of a grid, back in codeword order."""
    return layers_to_codeword(grid.values[:, list(cfg.data_symbols), :])


def fft_bins(n_sc, n_fft):
    """FFT bin of every allocated subcarrier."""
    return subcarrier_offsets(n_sc) % n_fft


def subcarrier_offsets(n_sc):
    """Signed frequency index of every allocated subcarrier."""
    return np.arange(n_sc) - n_sc // 2


def ofdm_modulate(grid, num):
    """CP-OFDM modulation of a 14-symbol grid (unitary IFFT)."""
    n_ports, n_symbols, n_sc = grid.values.shape
    if n_sc > num.n_fft:
        raise ConfigurationError(f'{n_sc} subcarriers exceed N_fft')
    spectrum = np.zeros((n_ports, n_symbols, num.n_fft), dtype=np.complex128)
    spectrum[..., fft_bins(n_sc, num.n_fft)] = grid.values
    body = np.fft.ifft(spectrum, axis=-1) * math.sqrt(num.n_fft)
    pieces = []
    for l, cp in enumerate(num.cp_lengths):
        pieces.append(body[:, l, num.n_fft - cp :])
        pieces.append(body[:, l, :])
    return TimeSignal(np.concatenate(pieces, axis=-1), num.sample_rate)


def design_tx_filter(num, n_prb, bandwidth_hz, n_taps=153):
    """Least-squares low-pass FIR for the occupied band.

    The pass band ends at the edge of the allocation, the stop band starts
    at half the channel bandwidth.
    """
    fs = num.sample_rate
    f_pass = SUBCARRIERS_PER_PRB * n_prb * num.subcarrier_spacing / 2
    f_stop = bandwidth_hz / 2
    if not f_pass < f_stop < fs / 2:
        raise ConfigurationError(
            f'infeasible band edges: pass {f_pass:.0f} Hz, stop '
            f'{f_stop:.0f} Hz, Nyquist {fs / 2:.0f} Hz'
        )
    if n_taps % 2 == 0 or n_taps < 3:
        raise ConfigurationError('the filter needs an odd number of taps')
    log(
        'designing %d-tap filter: pass %.3f MHz stop %.3f MHz',
        n_taps,
        f_pass / 1e6,
        f_stop / 1e6,
    )
    return signal.firls(
        n_taps, [0, f_pass, f_stop, fs / 2], [1, 1, 0, 0], fs=fs
    )


def filter_response(h, num, n_points=4096):
    """Magnitude response in dB on ``n_points`` frequencies up to Nyquist."""
    freqs, resp = signal.freqz(h, worN=n_points, fs=num.sample_rate)
    return freqs, 20 * np.log10(np.maximum(np.abs(resp), 1e-12))


def apply_filter(sig, h):
    """Full convolution of every antenna with ``h``."""
    h = np.asarray(h)
    out = signal.fftconvolve(sig.samples, h[None, :], mode='full', axes=-1)
    return TimeSignal(out, sig.sample_rate, sig.delay + (h.size - 1) // 2)


def window_starts(num, delay=0):
    """First sample of every symbol's FFT window.

    The window starts half a cyclic prefix early, which leaves room for
    timing errors in both directions.
    """
    starts = np.asarray(num.symbol_starts)
    cps = np.asarray(num.cp_lengths)
    return delay + starts + cps - cps // 2


def ofdm_demodulate(sig, num, n_sc):
    """Inverse of :func:`ofdm_modulate` for every receive antenna.

    Skips the filter delay recorded on ``sig`` and undoes the phase ramp
    of the early FFT window, so that a clean loopback returns the grid.
    """
    starts = window_starts(num, sig.delay)
    needed = starts[-1] + num.n_fft
    if sig.samples.shape[-1] < needed:
        raise SignalError(
            f'signal has {sig.samples.shape[-1]} samples, slot needs '
            f'{needed}'
        )
    idx = starts[:, None] + np.arange(num.n_fft)[None, :]
    spectrum = np.fft.fft(sig.samples[:, idx], axis=-1) / math.sqrt(num.n_fft)
    values = spectrum[..., fft_bins(n_sc, num.n_fft)]
    backoff = np.asarray(num.cp_lengths) // 2
    k = subcarrier_offsets(n_sc)
    values *= np.exp(2j * np.pi * np.outer(backoff, k) / num.n_fft)
    return ResourceGrid(values=values, window_starts=starts)


def export_iq(sig, directory, prefix='capture'):
    """Write ``sig`` as interleaved little-endian float32 I/Q.

    One ``<prefix>_ant<i>.iq`` file per antenna plus ``<prefix>.json``
    describing the capture.
    """
    from .schemas import IqHeaderSchema

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for a in range(sig.n_antennas):
        iq = np.empty(2 * sig.samples.shape[-1], dtype='<f4')
        iq[0::2] = sig.samples[a].real
        iq[1::2] = sig.samples[a].imag
        path = directory / f'{prefix}_ant{a}.iq'
        iq.tofile(path)
        files.append(path.name)
    header = IqHeaderSchema().dumps(
        {
            'format_version': IQ_FORMAT_VERSION,
            'sample_rate': sig.sample_rate,
            'delay': sig.delay,
            'n_samples': sig.samples.shape[-1],
            'sample_format': 'complex64-le-interleaved',
            'files': files,
        },
        indent=2,
    )
    (directory / f'{prefix}.json').write_text(header)
    log('exported %d antenna(s) to %s', sig.n_antennas, directory)
    return files
