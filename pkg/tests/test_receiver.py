import math

import numpy as np
import pytest
from scipy import stats

from pusch_sim import channel, receiver, sim, waveform
from pusch_sim.channel import ChannelRealization, ImpairmentSpec, spawn_rng
from pusch_sim.errors import LengthMismatchError
from pusch_sim.ldpc import L_MAX
from pusch_sim.waveform import Modulation, Numerology, PuschConfig


def _grid_through(cfg, num, rng, real=None, impairments=None, noise=None):
    symbols = waveform.map_symbols(
        rng.integers(0, 2, cfg.coded_bits(2)), 'QPSK'
    )
    grid = waveform.build_grid(symbols, cfg)
    sig = waveform.ofdm_modulate(grid, num)
    real = real or ChannelRealization.identity(
        cfg.n_layers, cfg.n_layers, num.sample_rate
    )
    rx = channel.apply_channel(sig, real, impairments, noise)
    return grid, waveform.ofdm_demodulate(rx, num, cfg.n_sc)


def test_ls_estimate_of_identity_channel(rng):
    num = Numerology(mu=1, n_fft=256)
    cfg = PuschConfig(n_prb=8)
    _, rx = _grid_through(cfg, num, rng)
    dmrs = waveform.generate_dmrs(cfg)
    est = receiver.estimate_ls(rx, dmrs)
    assert est.pilots.shape == (2, 2, 2, 48)
    np.testing.assert_allclose(est.pilots[0, 0], 1.0, atol=1e-9)
    np.testing.assert_allclose(est.pilots[1, 1], 1.0, atol=1e-9)
    np.testing.assert_allclose(est.pilots[0, 1], 0.0, atol=1e-9)


def test_estimate_ls_rejects_narrow_grid():
    cfg = PuschConfig(n_prb=8)
    dmrs = waveform.generate_dmrs(cfg)
    narrow = waveform.ResourceGrid(values=np.zeros((2, 14, 12), complex))
    with pytest.raises(LengthMismatchError):
        receiver.estimate_ls(narrow, dmrs)


def test_snr_estimate_saturates_without_noise(rng):
    num = Numerology(mu=1, n_fft=256)
    cfg = PuschConfig(n_prb=8)
    _, rx = _grid_through(cfg, num, rng)
    est = receiver.estimate_ls(rx, waveform.generate_dmrs(cfg))
    snr = receiver.estimate_snr(est)
    assert snr.saturated
    assert snr.db == pytest.approx(40.0)


@pytest.mark.parametrize('snr_db', [0.0, 10.0, 20.0, 30.0])
def test_snr_estimate_on_flat_channel(snr_db):
    rng = np.random.default_rng(int(snr_db) + 3)
    n = 636
    sigma2 = 10 ** (-snr_db / 10)
    ls = 1.0 + math.sqrt(sigma2 / 2) * (
        rng.standard_normal((2, 2, 2, n))
        + 1j * rng.standard_normal((2, 2, 2, n))
    )
    est = receiver.ChannelEstimate(
        pilots=ls, positions=[np.arange(n)] * 2, symbols=(2, 11)
    )
    snr = receiver.estimate_snr(est)
    assert abs(snr.db - snr_db) < 1.0
    assert snr.noise_var == pytest.approx(sigma2, rel=0.1)


def test_snr_estimate_clamps_low():
    rng = np.random.default_rng(0)
    ls = 0.01 + rng.standard_normal((1, 1, 1, 3000)) + 0j
    est = receiver.ChannelEstimate(
        pilots=ls, positions=[np.arange(3000)], symbols=(2,)
    )
    snr = receiver.estimate_snr(est)
    assert snr.db == pytest.approx(-10.0)
    assert snr.saturated


def test_mmse_with_identity_covariance_halves_estimate():
    ls = np.array([[[[1.0 + 1j, 2.0, -1j]]]])
    est = receiver.ChannelEstimate(
        pilots=ls, positions=[np.arange(3)], symbols=(2,)
    )
    out = receiver.estimate_mmse(est, 1.0, np.eye(3))
    np.testing.assert_allclose(out.pilots, ls / 2)


def test_mmse_rejects_non_hermitian_covariance():
    est = receiver.ChannelEstimate(
        pilots=np.ones((1, 1, 1, 2), complex),
        positions=[np.arange(2)],
        symbols=(2,),
    )
    with pytest.raises(ValueError):
        receiver.estimate_mmse(est, 1.0, np.array([[1, 1j], [1j, 1]]))
    with pytest.raises(LengthMismatchError):
        receiver.estimate_mmse(est, 1.0, np.eye(3))


def test_uniform_pdp_covariance():
    model = receiver.uniform_pdp_covariance(40, 2, 256, 18)
    rhh = model.rhh
    assert rhh.shape == (40, 40)
    np.testing.assert_allclose(np.diag(rhh), 1.0)
    np.testing.assert_allclose(rhh, rhh.conj().T, atol=1e-12)
    assert model.eigvals.min() >= 0
    # Direct sum over the uniform taps.
    taps = np.arange(18)
    direct = np.mean(np.exp(-2j * np.pi * (2 * 3 - 2 * 7) * taps / 256))
    assert np.isclose(rhh[3, 7], direct)
    assert receiver.uniform_pdp_covariance(40, 2, 256, 18) is model


def test_mmse_reduces_estimation_error():
    rng = np.random.default_rng(8)
    n_fft, spacing, n, cp = 256, 2, 48, 18
    model = receiver.uniform_pdp_covariance(n, spacing, n_fft, cp)
    kappa = spacing * np.arange(n)
    ls_err = mmse_err = 0.0
    sigma2 = 0.1
    for _ in range(50):
        taps = (rng.standard_normal(cp) + 1j * rng.standard_normal(cp)) / math.sqrt(2 * cp)
        h = np.exp(-2j * np.pi * np.outer(kappa, np.arange(cp)) / n_fft) @ taps
        noisy = h + math.sqrt(sigma2 / 2) * (
            rng.standard_normal(n) + 1j * rng.standard_normal(n)
        )
        smoothed = model.smooth(noisy, 1 / sigma2)
        ls_err += np.mean(np.abs(noisy - h) ** 2)
        mmse_err += np.mean(np.abs(smoothed - h) ** 2)
    assert mmse_err < ls_err


def test_interpolation_reproduces_smooth_channel():
    n_sc = 96
    kappa = np.arange(n_sc)
    h = np.exp(-2j * np.pi * kappa * 2 / 256)
    positions = [np.arange(0, n_sc, 2), np.arange(1, n_sc, 2)]
    pilots = np.stack([h[p] for p in positions])[None, :, None, :]
    pilots = np.repeat(pilots, 2, axis=2)
    est = receiver.ChannelEstimate(pilots, positions, (2, 11))
    full = receiver.interpolate_estimate(est, n_sc).full
    assert full.shape == (1, 2, 14, n_sc)
    np.testing.assert_allclose(full[0, 0, 5], h, atol=1e-3)
    np.testing.assert_allclose(full[0, 1, 0], h, atol=1e-3)


def test_interpolation_is_linear_in_time():
    positions = [np.arange(0, 12, 2)]
    pilots = np.zeros((1, 1, 2, 6), complex)
    pilots[..., 0, :] = 1.0
    pilots[..., 1, :] = 4.0
    full = receiver.interpolate_estimate(
        receiver.ChannelEstimate(pilots, positions, (2, 5)), 12
    ).full
    np.testing.assert_allclose(full[0, 0, 3], 2.0)
    np.testing.assert_allclose(full[0, 0, 8], 7.0)
    np.testing.assert_allclose(full[0, 0, 0], -1.0)


def test_interpolation_with_single_dmrs_symbol_is_constant():
    pilots = np.full((1, 1, 1, 6), 2.0 + 1j)
    full = receiver.interpolate_estimate(
        receiver.ChannelEstimate(pilots, [np.arange(0, 12, 2)], (2,)), 12
    ).full
    np.testing.assert_allclose(full, 2.0 + 1j)


def test_few_pilots_fall_back_to_linear():
    pilots = np.array([[[[1.0, 3.0]]]], dtype=complex)
    est = receiver.interpolate_estimate(
        receiver.ChannelEstimate(pilots, [np.array([0, 4])], (2,)), 5
    )
    assert est.linear_fallback
    np.testing.assert_allclose(est.full[0, 0, 0], [1, 1.5, 2, 2.5, 3])


def test_mmse_equalizer_scalar_case():
    y = np.array([[[0.0, 2.0 + 2j]]])
    grid = waveform.ResourceGrid(values=y.reshape(1, 1, 2))
    est = receiver.ChannelEstimate(
        pilots=np.ones((1, 1, 1, 1)),
        positions=[np.arange(1)],
        symbols=(0,),
        full=np.ones((1, 1, 1, 2), complex),
    )
    eq = receiver.equalize_mmse(grid, est, 1.0, (0,))
    np.testing.assert_allclose(eq.symbols[0, 0], [0.0, 1.0 + 1j])
    np.testing.assert_allclose(eq.gain, 0.5)
    np.testing.assert_allclose(eq.unbiased()[0, 0], [0.0, 2.0 + 2j])
    np.testing.assert_allclose(eq.noise_var, 1.0)


def test_mmse_equalizer_separates_two_layers(rng):
    h = np.array([[1.0, 0.3j], [0.2, 0.9]])
    x = waveform.map_symbols(rng.integers(0, 2, 2 * 2 * 10), 'QPSK').reshape(
        2, 1, 10
    )
    y = np.einsum('rt,tsk->rsk', h, x)
    full = np.broadcast_to(h[:, :, None, None], (2, 2, 1, 10)).copy()
    est = receiver.ChannelEstimate(
        pilots=full[:, :, :, :1], positions=[np.arange(1)] * 2,
        symbols=(0,), full=full,
    )
    eq = receiver.equalize_mmse(
        waveform.ResourceGrid(values=y), est, 1e6, (0,)
    )
    np.testing.assert_allclose(eq.unbiased(), x, atol=1e-4)


def test_qpsk_demap_reference_value():
    llr = receiver.demap_llr(np.array([(1 + 1j) / math.sqrt(2)]), 1.0, 'QPSK')
    np.testing.assert_allclose(llr, [[2.0, 2.0]])


def test_demap_saturates_at_high_snr():
    symbols = np.array([(1 + 1j) / math.sqrt(2), (-1 + 1j) / math.sqrt(2)])
    llr = receiver.demap_llr(symbols, 1e-3, 'QPSK')
    np.testing.assert_array_equal(llr, [[L_MAX, L_MAX], [-L_MAX, L_MAX]])


@pytest.mark.parametrize('modulation', list(Modulation))
def test_demap_bounded_for_tiny_noise(modulation, rng):
    q = modulation.bits_per_symbol
    bits = rng.integers(0, 2, 40 * q, dtype=np.uint8)
    symbols = waveform.map_symbols(bits, modulation)
    llr = receiver.demap_llr(symbols, 1e-9, modulation)
    assert np.abs(llr).max() <= L_MAX


@pytest.mark.parametrize('modulation', list(Modulation))
def test_demap_signs_recover_noiseless_bits(modulation, rng):
    q = modulation.bits_per_symbol
    bits = rng.integers(0, 2, 60 * q, dtype=np.uint8)
    symbols = waveform.map_symbols(bits, modulation)
    llr = receiver.demap_llr(symbols, 0.1, modulation)
    np.testing.assert_array_equal((llr.ravel() < 0).astype(np.uint8), bits)


def test_dmrs_evm_is_zero_for_a_perfect_estimate(rng):
    num = Numerology(mu=1, n_fft=256)
    cfg = PuschConfig(n_prb=8)
    _, rx = _grid_through(cfg, num, rng)
    dmrs = waveform.generate_dmrs(cfg)
    est = receiver.interpolate_estimate(receiver.estimate_ls(rx, dmrs), cfg.n_sc)
    assert receiver.dmrs_evm(rx, est, dmrs) < 1e-6


def test_sync_estimates_integer_timing_offset(rng):
    num = Numerology(mu=1, n_fft=256)
    cfg = PuschConfig(n_prb=8)
    _, rx = _grid_through(cfg, num, rng, impairments=ImpairmentSpec(sto_samples=4))
    dmrs = waveform.generate_dmrs(cfg)
    sync = receiver.estimate_sync(rx, dmrs, num, cfg.dmrs_spacing)
    assert sync.sto == pytest.approx(4.0, abs=0.1)
    assert abs(sync.cfo_hz) < 1.0
    fixed = receiver.correct_sync(rx, receiver.SyncEstimate(sto=4.0), num)
    est = receiver.estimate_ls(fixed, dmrs)
    np.testing.assert_allclose(est.pilots[0, 0], 1.0, atol=1e-9)


def test_sync_estimates_and_removes_frequency_offset(rng):
    num = Numerology(mu=1, n_fft=256)
    cfg = PuschConfig(n_prb=8)
    cfo = 0.02 * num.subcarrier_spacing
    grid, rx = _grid_through(
        cfg, num, rng, impairments=ImpairmentSpec(cfo_hz=cfo)
    )
    dmrs = waveform.generate_dmrs(cfg)
    sync = receiver.estimate_sync(rx, dmrs, num, cfg.dmrs_spacing)
    assert sync.cfo_valid
    assert sync.cfo_hz == pytest.approx(cfo, rel=0.05)
    before = np.mean(np.abs(rx.values - grid.values) ** 2)
    fixed = receiver.correct_sync(rx, receiver.SyncEstimate(cfo_hz=cfo), num)
    after = np.mean(np.abs(fixed.values - grid.values) ** 2)
    assert after < before / 10


def test_single_dmrs_symbol_flags_cfo(rng):
    num = Numerology(mu=1, n_fft=256)
    cfg = PuschConfig(n_prb=8, dmrs_symbols=(2,))
    _, rx = _grid_through(cfg, num, rng)
    sync = receiver.estimate_sync(
        rx, waveform.generate_dmrs(cfg), num, cfg.dmrs_spacing
    )
    assert not sync.cfo_valid
    assert sync.cfo_hz == 0.0


def test_genie_estimate():
    h = np.ones((2, 2, 14, 48), complex)
    cfg = PuschConfig(n_prb=4)
    dmrs = waveform.generate_dmrs(cfg)
    est, snr = receiver.genie_estimate(h, np.array([0.1, 0.1]), dmrs)
    assert est.pilots.shape == (2, 2, 2, 24)
    assert snr.db == pytest.approx(10.0)
    assert snr.noise_var == pytest.approx(0.1)
    _, saturated = receiver.genie_estimate(h, None, dmrs)
    assert saturated.saturated


def test_sync_on_reference_grid(rng):
    num = Numerology(mu=1, n_fft=2048)
    cfg = PuschConfig(n_prb=106)
    grid, rx = _grid_through(
        cfg, num, rng, impairments=ImpairmentSpec(sto_samples=8, cfo_hz=200.0)
    )
    dmrs = waveform.generate_dmrs(cfg)
    sync = receiver.estimate_sync(rx, dmrs, num, cfg.dmrs_spacing)
    assert sync.sto == pytest.approx(8.0, abs=0.1)
    assert sync.cfo_valid
    assert sync.cfo_hz == pytest.approx(200.0, abs=2.0)
    fixed = receiver.correct_sync(rx, sync, num)
    before = np.mean(np.abs(rx.values - grid.values) ** 2)
    after = np.mean(np.abs(fixed.values - grid.values) ** 2)
    assert after < before / 10


def test_snr_estimate_follows_the_applied_noise(small_cfg):
    link = sim.get_link(small_cfg.replace(n_layers=1, n_rx=1))
    sweep = np.arange(0.0, 31.0, 2.0)
    true_db, est_db = [], []
    for i, snr_db in enumerate(sweep):
        truth, measured = [], []
        for trial in range(10):
            rng = spawn_rng(5, i, trial)
            rx, _ = link.propagate(link.transmit(rng), snr_db, rng)
            grid = waveform.ofdm_demodulate(rx, link.num, link.pusch.n_sc)
            snr = receiver.estimate_snr(receiver.estimate_ls(grid, link.dmrs))
            truth.append(1 / rx.noise_var[0])
            measured.append(snr.rho)
        true_db.append(10 * np.log10(np.mean(truth)))
        est_db.append(10 * np.log10(np.mean(measured)))
    np.testing.assert_allclose(est_db, true_db, atol=1.0)
    assert stats.spearmanr(sweep, est_db)[0] > 0.99


def _pilot_truth(h, est):
    """True channel at the pilots, laid out like ``est.pilots``."""
    return np.stack(
        [
            np.stack(
                [h[:, p, s][:, est.positions[p]] for s in est.symbols], axis=1
            )
            for p in range(est.n_ports)
        ],
        axis=1,
    )


@pytest.mark.slow
@pytest.mark.parametrize('snr_db', [0.0, 10.0, 20.0])
def test_mmse_beats_ls_on_fading_channel(small_cfg, snr_db):
    link = sim.get_link(small_cfg.replace(channel='TDLA30'))
    ls_err = mmse_err = 0.0
    for trial in range(100):
        rng = spawn_rng(11, int(snr_db), trial)
        rx, real = link.propagate(link.transmit(rng), snr_db, rng)
        grid = waveform.ofdm_demodulate(rx, link.num, link.pusch.n_sc)
        h = channel.frequency_response(
            real,
            link.num.n_fft,
            link.pusch.n_sc,
            grid.window_starts,
            link.tx_filter,
        )
        ls = receiver.estimate_ls(grid, link.dmrs)
        rho = receiver.estimate_snr(ls).rho
        mmse = receiver.estimate_mmse(ls, rho, link.covariance)
        truth = _pilot_truth(h, ls)
        ls_err += np.mean(np.abs(ls.pilots - truth) ** 2)
        mmse_err += np.mean(np.abs(mmse.pilots - truth) ** 2)
    assert mmse_err < ls_err
