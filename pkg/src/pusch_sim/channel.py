"""Propagation model: tapped-delay-line Rayleigh fading, frequency and
timing offsets, and additive white Gaussian noise.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import assets
from .debug import log
from .errors import AssetError, SignalError
from .waveform import TimeSignal, subcarrier_offsets

#: Oscillators per fading process.
DEFAULT_OSCILLATORS = 32


def spawn_rng(seed, *counters):
    """Generator for one unit of work, derived from the master seed.

    The same ``(seed, counters)`` always yields the same stream, no matter
    which process asks for it or in what order.
    """
    keys = tuple(int(c) for c in counters)
    return np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=keys)
    )


@dataclass(frozen=True)
class TdlProfile:
    """Power-delay profile of a tapped delay line."""

    name: str
    delays_s: tuple
    powers_db: tuple
    checksum: str | None = None

    @property
    def n_taps(self):
        return len(self.delays_s)

    def linear_powers(self):
        """Tap powers normalised to a total of one."""
        p = 10 ** (np.asarray(self.powers_db) / 10)
        return p / p.sum()

    def sample_delays(self, sample_rate):
        """Tap delays rounded to the nearest sample."""
        return np.rint(np.asarray(self.delays_s) * sample_rate).astype(int)


def load_tdl_profile(name='TDLA30'):
    """Read a packaged power-delay profile and check its sidecar."""
    stem = name.lower()
    meta = assets.read_sidecar('tdl', f'{stem}.json')
    data = assets.read_bytes('tdl', f'{stem}.csv')
    checksum = assets.verify_checksum(data, meta['sha256'], meta['name'])
    rows = assets.parse_csv_rows(data, meta['name'], 2)
    if not rows:
        raise AssetError(f'profile {name} has no taps')
    delays = tuple(r[0] * 1e-9 for r in rows)
    if any(b < a for a, b in zip(delays, delays[1:])) or delays[0] < 0:
        raise AssetError(f'profile {name} delays are not sorted')
    return TdlProfile(
        name=meta['name'],
        delays_s=delays,
        powers_db=tuple(r[1] for r in rows),
        checksum=checksum,
    )


@dataclass
class ChannelRealization:
    """Per-sample complex tap gains ``gains[rx, tx, tap, n]``.

    A static channel may store a single sample on the last axis, which is
    then used for every sample.
    """

    gains: np.ndarray
    delays: np.ndarray
    sample_rate: float

    @property
    def n_rx(self):
        return self.gains.shape[0]

    @property
    def n_tx(self):
        return self.gains.shape[1]

    @property
    def n_samples(self):
        return self.gains.shape[-1]

    @property
    def is_static(self):
        return self.n_samples == 1

    @classmethod
    def identity(cls, n_rx, n_tx, sample_rate):
        """Flat, unit channel from tx ``i`` to rx ``i`` only."""
        gains = np.zeros((n_rx, n_tx, 1, 1), dtype=np.complex128)
        for i in range(min(n_rx, n_tx)):
            gains[i, i, 0, 0] = 1.0
        return cls(gains, np.zeros(1, dtype=int), sample_rate)


@dataclass(frozen=True)
class ImpairmentSpec:
    snr_db: float | None = None
    cfo_hz: float = 0.0
    sto_samples: int = 0


def _sos_process(doppler_hz, t, rng, n_osc):
    """One unit-power Rayleigh fading waveform by sum of sinusoids.

    Arrival angles are spread evenly over a quarter circle with a common
    random rotation; each oscillator has its own phase and in-phase /
    quadrature weights.
    """
    n = np.arange(1, n_osc + 1)
    theta = rng.uniform(-np.pi, np.pi)
    alpha = (2 * np.pi * n - np.pi + theta) / (4 * n_osc)
    phi = rng.uniform(-np.pi, np.pi, n_osc)
    psi = rng.uniform(-np.pi, np.pi, n_osc)
    w_d = 2 * np.pi * doppler_hz
    osc = np.cos(w_d * np.outer(np.cos(alpha), t) + phi[:, None])
    scale = math.sqrt(2.0 / n_osc)
    return scale * (np.cos(psi) @ osc + 1j * (np.sin(psi) @ osc))


def generate_fading(
    profile,
    doppler_hz,
    n_rx,
    n_tx,
    n_samples,
    sample_rate,
    rng,
    n_osc=DEFAULT_OSCILLATORS,
):
    """Independent fading for every rx/tx pair and tap."""
    if n_samples < 1:
        raise SignalError('a realization needs at least one sample')
    t = np.arange(n_samples) / sample_rate
    amplitudes = np.sqrt(profile.linear_powers())
    gains = np.empty((n_rx, n_tx, profile.n_taps, n_samples), np.complex128)
    for r in range(n_rx):
        for tx in range(n_tx):
            for tap, amp in enumerate(amplitudes):
                fade = _sos_process(doppler_hz, t, rng, n_osc)
                gains[r, tx, tap] = amp * fade
    log(
        '%s fading: %dx%d, %d taps, %d samples, f_d=%.1f Hz',
        profile.name,
        n_rx,
        n_tx,
        profile.n_taps,
        n_samples,
        doppler_hz,
    )
    return ChannelRealization(
        gains, profile.sample_delays(sample_rate), sample_rate
    )


def awgn(sig, snr_db, rng):
    """Add noise at ``snr_db`` relative to each antenna's mean power.

    The returned signal records the per-antenna noise variance.
    """
    power = sig.mean_power(axis=-1)
    if np.any(power <= 0):
        raise SignalError('cannot set an SNR on a zero-power signal')
    noise_var = power / 10 ** (snr_db / 10)
    shape = sig.samples.shape
    noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    noise *= np.sqrt(noise_var / 2)[:, None]
    return TimeSignal(
        sig.samples + noise, sig.sample_rate, sig.delay, noise_var=noise_var
    )


def _shift(samples, sto):
    """Delay (positive) or advance (negative) by whole samples."""
    out = np.zeros_like(samples)
    if sto >= 0:
        out[..., sto:] = samples[..., : samples.shape[-1] - sto]
    else:
        out[..., :sto] = samples[..., -sto:]
    return out


def apply_channel(sig, real, impairments=None, rng=None):
    """Pass ``sig`` through fading, CFO, timing offset and noise.

    :param real: Realization with ``n_tx == sig.n_antennas``; time-varying
        realizations must cover every sample of ``sig``.
    :param impairments: CFO, timing offset and SNR; no noise when the SNR
        is None.
    """
    impairments = impairments or ImpairmentSpec()
    x = sig.samples
    n = x.shape[-1]
    if real.n_tx != sig.n_antennas:
        raise SignalError(
            f'realization has {real.n_tx} tx ports, signal has '
            f'{sig.n_antennas}'
        )
    if not real.is_static and real.n_samples < n:
        raise SignalError(
            f'realization covers {real.n_samples} samples, signal has {n}'
        )
    y = np.zeros((real.n_rx, n), dtype=np.complex128)
    for tap, d in enumerate(real.delays):
        delayed = _shift(x, int(d))
        if real.is_static:
            y += real.gains[:, :, tap, 0] @ delayed
        else:
            y += np.einsum('rtn,tn->rn', real.gains[:, :, tap, :n], delayed)
    if impairments.cfo_hz:
        t = np.arange(n) / sig.sample_rate
        y *= np.exp(2j * np.pi * impairments.cfo_hz * t)[None, :]
    if impairments.sto_samples:
        y = _shift(y, impairments.sto_samples)
    out = TimeSignal(y, sig.sample_rate, sig.delay)
    if impairments.snr_db is not None:
        if rng is None:
            raise ValueError('noise needs a random generator')
        out = awgn(out, impairments.snr_db, rng)
    return out


def frequency_response(real, n_fft, n_sc, window_starts, tx_filter=None):
    """True per-RE channel ``H[rx, tx, symbol, subcarrier]``.

    Tap gains are averaged over each FFT window; the transmit filter, if
    given, is included with its group delay removed.
    """
    k = subcarrier_offsets(n_sc)
    ramps = np.exp(-2j * np.pi * np.outer(real.delays, k) / n_fft)
    if real.is_static:
        g = np.repeat(real.gains[..., 0][:, :, None, :], len(window_starts), 2)
    else:
        g = np.stack(
            [
                real.gains[..., w : w + n_fft].mean(axis=-1)
                for w in window_starts
            ],
            axis=2,
        )
    h = g @ ramps
    if tx_filter is not None:
        taps = np.arange(len(tx_filter)) - (len(tx_filter) - 1) // 2
        resp = np.exp(-2j * np.pi * np.outer(k, taps) / n_fft) @ tx_filter
        h = h * resp
    return h
