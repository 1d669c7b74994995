"""Receive-side processing of a demodulated slot.

Synchronisation from the DMRS, least-squares and MMSE channel estimation
with pilot-based SNR estimation, spline interpolation onto the grid, MMSE
MIMO equalisation and max-log soft demapping.
"""
import functools
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import uniform_filter1d

from .debug import log
from .errors import LengthMismatchError
from .ldpc import L_MAX
from .waveform import (
    Modulation,
    layers_to_codeword,
    subcarrier_offsets,
    window_starts as default_window_starts,
)

#: Moving-average length of the pilot SNR estimator.
SNR_WINDOW = 7
SNR_MIN_DB = -10.0
SNR_MAX_DB = 40.0
#: Taps of the truncated inter-carrier interference kernel.
CFO_KERNEL_TAPS = 9
#: Pilot-constellation factor of the MMSE filter, 1 for QPSK pilots.
PILOT_BETA = 1.0
#: Fewer pilots than this fall back to linear interpolation.
MIN_SPLINE_PILOTS = 4


@dataclass
class SyncEstimate:
    """Timing offset in samples and frequency offset in Hz.

    ``cfo_valid`` is False when the slot has a single DMRS symbol and the
    frequency offset could not be measured.
    """

    sto: float = 0.0
    cfo_hz: float = 0.0
    cfo_valid: bool = True


@dataclass
class SnrEstimate:
    """Pilot SNR ``rho`` and the per-RE noise variance behind it."""

    rho: float
    noise_var: float
    saturated: bool = False

    @property
    def db(self):
        return 10 * np.log10(self.rho)


@dataclass
class ChannelEstimate:
    """Channel estimates on the pilots and, once interpolated, everywhere.

    ``pilots[rx, port, i, n]`` belongs to DMRS symbol ``symbols[i]`` and
    subcarrier ``positions[port][n]``. ``full[rx, port, symbol, kappa]``
    covers the whole grid.
    """

    pilots: np.ndarray
    positions: list
    symbols: tuple
    full: np.ndarray | None = None
    linear_fallback: bool = False

    @property
    def n_rx(self):
        return self.pilots.shape[0]

    @property
    def n_ports(self):
        return self.pilots.shape[1]


@dataclass
class EqualizedSymbols:
    """Output of the MMSE equaliser, ``[layer, data symbol, subcarrier]``.

    ``symbols`` are the raw filter outputs, biased by ``gain``;
    ``noise_var`` is the interference-plus-noise variance after removing
    the bias.
    """

    symbols: np.ndarray
    gain: np.ndarray
    noise_var: np.ndarray

    def unbiased(self):
        return self.symbols / self.gain


def _pilot_ls(grid, dmrs):
    """``Y * conj(x)`` on every pilot; pilots have unit modulus."""
    per_port = []
    for p, pos in enumerate(dmrs.positions):
        y = grid.values[:, list(dmrs.symbols), :][:, :, pos]
        per_port.append(y * np.conj(dmrs.values[p])[None])
    return np.stack(per_port, axis=1)


def estimate_ls(grid, dmrs):
    """Least-squares estimate on the DMRS positions of every port."""
    if grid.n_sc < max(pos[-1] for pos in dmrs.positions) + 1:
        raise LengthMismatchError('grid is narrower than the DMRS pattern')
    return ChannelEstimate(
        pilots=_pilot_ls(grid, dmrs),
        positions=[np.asarray(p) for p in dmrs.positions],
        symbols=tuple(dmrs.symbols),
    )


def estimate_sync(grid, dmrs, num, spacing):
    """Timing and frequency offset from the DMRS.

    Timing: peak of the pilot impulse response with quadratic refinement.
    Frequency: phase drift of the pilots between the first and the last
    DMRS symbol.
    """
    ls = _pilot_ls(grid, dmrs)
    n_fft = num.n_fft
    cir = np.fft.ifft(ls, n=n_fft, axis=-1)
    power = np.sqrt(np.sum(np.abs(cir) ** 2, axis=(0, 1, 2)))
    m = int(np.argmax(power))
    left, mid, right = power[m - 1], power[m], power[(m + 1) % n_fft]
    curvature = left - 2 * mid + right
    delta = 0.0 if curvature == 0 else 0.5 * (left - right) / curvature
    if m > n_fft // 2:
        m -= n_fft
    sto = (m + delta) / spacing

    if len(dmrs.symbols) < 2:
        log('single DMRS symbol, frequency offset not estimated')
        return SyncEstimate(sto=sto, cfo_hz=0.0, cfo_valid=False)
    starts = grid.window_starts
    if starts is None:
        starts = default_window_starts(num)
    first, last = dmrs.symbols[0], dmrs.symbols[-1]
    corr = np.sum(np.conj(ls[:, :, 0]) * ls[:, :, -1])
    elapsed = (starts[last] - starts[first]) / num.sample_rate
    cfo = np.angle(corr) / (2 * np.pi * elapsed)
    log('sync estimate: sto=%.2f samples, cfo=%.1f Hz', sto, cfo)
    return SyncEstimate(sto=float(sto), cfo_hz=float(cfo))


@functools.lru_cache(maxsize=64)
def _ici_kernel(eps, n_fft):
    """Taps ``W[q]``, q = -4..4, undoing a normalised frequency offset."""
    half = CFO_KERNEL_TAPS // 2
    q = np.arange(-half, half + 1)
    t = np.arange(n_fft)
    return np.exp(-2j * np.pi * np.outer(q + eps, t) / n_fft).mean(axis=1)


def correct_sync(grid, est, num):
    """Remove the estimated timing and frequency offsets from a grid."""
    values = grid.values.copy()
    n_sc = grid.n_sc
    starts = grid.window_starts
    if starts is None:
        starts = default_window_starts(num)
    if est.cfo_hz:
        eps = est.cfo_hz / num.subcarrier_spacing
        kernel = _ici_kernel(round(eps, 12), num.n_fft)
        half = CFO_KERNEL_TAPS // 2
        corrected = np.zeros_like(values)
        for i, w in enumerate(kernel):
            shift = i - half
            if shift >= 0:
                corrected[..., shift:] += w * values[..., : n_sc - shift]
            else:
                corrected[..., :shift] += w * values[..., -shift:]
        phase = np.exp(
            -2j * np.pi * est.cfo_hz * np.asarray(starts) / num.sample_rate
        )
        values = corrected * phase[None, :, None]
    if est.sto:
        k = subcarrier_offsets(n_sc)
        values *= np.exp(2j * np.pi * k * est.sto / num.n_fft)[None, None, :]
    return replace(grid, values=values)


def _smooth(x, window):
    return uniform_filter1d(x.real, window, axis=-1, mode='nearest') + 1j * (
        uniform_filter1d(x.imag, window, axis=-1, mode='nearest')
    )


def estimate_snr(est, window=SNR_WINDOW):
    """Pilot SNR from the spread of the LS estimate around its local mean.

    Signal and noise powers are averaged over every rx antenna, port and
    DMRS symbol before the ratio is taken, giving one SNR per slot rather
    than one per link. The pooled noise power is returned as ``noise_var``
    and regularises the equaliser.

    The moving average leaves ``(W - 1) / W`` of the noise in the residual
    and ``1 / W`` of it in the smoothed estimate; both are removed before
    the ratio is taken. The result is clamped to [-10, 40] dB.
    """
    ls = est.pilots
    smooth = _smooth(ls, window)
    num = np.mean(np.abs(smooth) ** 2, axis=-1)
    den = np.mean(np.abs(smooth - ls) ** 2, axis=-1)
    rho_min, rho_max = 10 ** (SNR_MIN_DB / 10), 10 ** (SNR_MAX_DB / 10)
    if np.all(den <= 1e-12 * num):
        log('pilot residual vanished, SNR saturated at %.0f dB', SNR_MAX_DB)
        power = float(np.mean(num)) or 1.0
        return SnrEstimate(
            rho=rho_max, noise_var=power / rho_max, saturated=True
        )
    noise = float(np.mean(den)) / (1 - 1 / window)
    signal = max(float(np.mean(num)) - noise / window, 0.0)
    rho = signal / noise
    clamped = min(max(rho, rho_min), rho_max)
    return SnrEstimate(
        rho=clamped, noise_var=noise, saturated=clamped != rho
    )


class CovarianceModel:
    """Channel correlation across pilots, kept in eigen-decomposed form.

    The MMSE smoother ``R (R + beta/rho I)^-1`` then only rescales the
    eigenvalues for every new SNR.
    """

    def __init__(self, rhh):
        rhh = np.asarray(rhh, dtype=np.complex128)
        if rhh.ndim != 2 or rhh.shape[0] != rhh.shape[1]:
            raise LengthMismatchError('Rhh must be square')
        if not np.allclose(rhh, rhh.conj().T):
            raise ValueError('Rhh must be Hermitian')
        eigvals, self.eigvecs = np.linalg.eigh(rhh)
        self.eigvals = np.maximum(eigvals, 0.0)
        self.rhh = rhh

    @property
    def size(self):
        return self.rhh.shape[0]

    def smooth(self, ls, rho, beta=PILOT_BETA):
        """Apply the MMSE smoother along the last axis of ``ls``."""
        gains = self.eigvals / (self.eigvals + beta / rho)
        coeffs = ls @ self.eigvecs.conj()
        return (coeffs * gains) @ self.eigvecs.T


@functools.lru_cache(maxsize=16)
def uniform_pdp_covariance(n_pilots, spacing, n_fft, length):
    """Pilot correlation of a channel with a flat delay profile.

    Taps are assumed uniform over ``length`` samples (the cyclic prefix).
    Only pilot differences matter, so the comb offset drops out.
    """
    kappa = spacing * np.arange(n_pilots)
    diff = kappa[:, None] - kappa[None, :]
    x = np.exp(-2j * np.pi * diff / n_fft)
    with np.errstate(divide='ignore', invalid='ignore'):
        r = (1 - x**length) / (length * (1 - x))
    r[diff == 0] = 1.0
    return CovarianceModel(r)


def estimate_mmse(ls, rho, rhh):
    """Smooth an LS pilot estimate with the MMSE filter.

    :param rhh: A :class:`CovarianceModel` or a Hermitian matrix matching
        the number of pilots per port.
    """
    model = rhh if isinstance(rhh, CovarianceModel) else CovarianceModel(rhh)
    if ls.pilots.shape[-1] != model.size:
        raise LengthMismatchError(
            f'Rhh is {model.size}x{model.size}, '
            f'{ls.pilots.shape[-1]} pilots per port'
        )
    return replace(ls, pilots=model.smooth(ls.pilots, rho), full=None)


def _time_weights(dmrs_symbols, n_symbols):
    """Linear inter/extrapolation weights from DMRS symbols to all symbols."""
    t = np.asarray(dmrs_symbols, dtype=np.float64)
    weights = np.zeros((n_symbols, t.size))
    if t.size == 1:
        weights[:, 0] = 1.0
        return weights
    for l in range(n_symbols):
        j = int(np.clip(np.searchsorted(t, l) - 1, 0, t.size - 2))
        w = (l - t[j]) / (t[j + 1] - t[j])
        weights[l, j] = 1 - w
        weights[l, j + 1] = w
    return weights


def interpolate_estimate(est, n_sc, n_symbols=14):
    """Cubic-spline across frequency, linear across time.

    Splines use natural end conditions. With fewer than four pilots per
    port the frequency step is linear and ``linear_fallback`` is set.
    """
    n_rx, n_ports, n_dmrs, _ = est.pilots.shape
    kappa = np.arange(n_sc)
    per_symbol = np.empty((n_rx, n_ports, n_dmrs, n_sc), dtype=np.complex128)
    fallback = False
    for p, pos in enumerate(est.positions):
        y = est.pilots[:, p].reshape(-1, pos.size).T
        stacked = np.concatenate([y.real, y.imag], axis=1)
        if pos.size >= MIN_SPLINE_PILOTS:
            fitted = CubicSpline(pos, stacked, bc_type='natural')(kappa)
        else:
            fallback = True
            fitted = np.stack(
                [np.interp(kappa, pos, col) for col in stacked.T], axis=1
            )
        half = y.shape[1]
        values = fitted[:, :half] + 1j * fitted[:, half:]
        per_symbol[:, p] = values.T.reshape(n_rx, n_dmrs, n_sc)
    if fallback:
        log('fewer than %d pilots, linear interpolation', MIN_SPLINE_PILOTS)
    weights = _time_weights(est.symbols, n_symbols)
    full = np.einsum('ld,rpdk->rplk', weights, per_symbol)
    return replace(est, full=full, linear_fallback=fallback)


def equalize_mmse(grid, est, rho, data_symbols, average_noise=True):
    """Linear MMSE detection of all layers on the data REs.

    :param est: Interpolated estimate (``est.full`` set).
    :param rho: Linear SNR used for the regularisation.
    :param average_noise: Average the post-equalisation noise over each
        OFDM symbol.
    """
    if est.full is None:
        raise ValueError('channel estimate has not been interpolated')
    data = list(data_symbols)
    g = np.moveaxis(est.full[:, :, data, :], (0, 1), (2, 3))
    y = np.moveaxis(grid.values[:, data, :], 0, -1)
    n_rx = g.shape[-2]
    gh = np.conj(np.swapaxes(g, -1, -2))
    a = g @ gh + np.eye(n_rx) / rho
    z = np.linalg.solve(a, y[..., None])
    s = (gh @ z)[..., 0]
    a_inv_g = np.linalg.solve(a, g)
    gain = np.real(np.einsum('...rt,...rt->...t', np.conj(g), a_inv_g))
    gain = np.clip(gain, 1e-12, 1 - 1e-12)
    noise = (1 - gain) / gain
    if average_noise:
        noise = np.broadcast_to(noise.mean(axis=1, keepdims=True), noise.shape)
    to_layers = (lambda x: np.moveaxis(x, -1, 0))
    return EqualizedSymbols(
        symbols=to_layers(s),
        gain=to_layers(gain),
        noise_var=to_layers(np.array(noise)),
    )


def _axis_llr(x, noise_var, modulation):
    """Max-log LLRs of the bits carried by one axis of the constellation."""
    half = modulation.bits_per_symbol // 2
    levels = modulation.pam_levels * modulation.scale
    patterns = (np.arange(levels.size)[:, None] >> np.arange(half)[::-1]) & 1
    dist = (x[..., None] - levels) ** 2
    llr = np.empty(x.shape + (half,))
    for j in range(half):
        d0 = dist[..., patterns[:, j] == 0].min(axis=-1)
        d1 = dist[..., patterns[:, j] == 1].min(axis=-1)
        llr[..., j] = (d1 - d0) / noise_var
    return llr


def demap_llr(symbols, noise_var, modulation):
    """Max-log LLRs, positive for bit 0.

    :param symbols: Unbiased equalised symbols, any shape.
    :param noise_var: Noise variance, broadcastable to ``symbols``.
    :returns: LLRs with a trailing axis of ``Q_m`` bits per symbol,
        clipped to +-L_MAX.
    """
    if isinstance(modulation, str):
        modulation = Modulation.from_name(modulation)
    symbols = np.asarray(symbols)
    noise_var = np.broadcast_to(np.asarray(noise_var, float), symbols.shape)
    re = _axis_llr(symbols.real, noise_var, modulation)
    im = _axis_llr(symbols.imag, noise_var, modulation)
    llr = np.empty(symbols.shape + (modulation.bits_per_symbol,))
    llr[..., 0::2] = re
    llr[..., 1::2] = im
    return np.clip(llr, -L_MAX, L_MAX)


def demap_codeword(eq, modulation):
    """Demap equalised layers into one LLR vector in codeword order."""
    llr = demap_llr(eq.unbiased(), eq.noise_var, modulation)
    return layers_to_codeword(llr).ravel()


def dmrs_evm(grid, est, dmrs):
    """EVM in percent of the DMRS after maximum-ratio combining."""
    if est.full is None:
        raise ValueError('channel estimate has not been interpolated')
    err = 0.0
    ref = 0.0
    for p, pos in enumerate(dmrs.positions):
        for i, l in enumerate(dmrs.symbols):
            h = est.full[:, p, l, pos]
            y = grid.values[:, l, pos]
            x_hat = np.sum(np.conj(h) * y, axis=0) / np.maximum(
                np.sum(np.abs(h) ** 2, axis=0), 1e-30
            )
            x = dmrs.values[p, i]
            err += np.sum(np.abs(x_hat - x) ** 2)
            ref += np.sum(np.abs(x) ** 2)
    return 100 * float(np.sqrt(err / ref))


def genie_estimate(h_true, noise_var, dmrs):
    """Estimates taken from the true channel, for genie-aided reception.

    :param h_true: ``H[rx, port, symbol, subcarrier]`` as returned by
        :func:`pusch_sim.channel.frequency_response`.
    :param noise_var: Per-RE noise variance (scalar or per antenna); None
        for a noiseless link.
    """
    pilots = np.stack(
        [
            h_true[:, p][:, list(dmrs.symbols)][..., pos]
            for p, pos in enumerate(dmrs.positions)
        ],
        axis=1,
    )
    est = ChannelEstimate(
        pilots=pilots,
        positions=[np.asarray(p) for p in dmrs.positions],
        symbols=tuple(dmrs.symbols),
        full=np.asarray(h_true),
    )
    rho_max = 10 ** (SNR_MAX_DB / 10)
    if noise_var is None or np.mean(noise_var) <= 0:
        return est, SnrEstimate(
            rho=rho_max, noise_var=1 / rho_max, saturated=True
        )
    sigma2 = float(np.mean(noise_var))
    return est, SnrEstimate(
        rho=min(1 / sigma2, rho_max),
        noise_var=sigma2,
        saturated=1 / sigma2 > rho_max,
    )
