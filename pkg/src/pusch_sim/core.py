"""Core business logic: one slot through transmitter, channel and receiver."""
from dataclasses import dataclass, field

import numpy as np

from . import channel, ldpc, receiver, transport, waveform
from .debug import log
from .errors import ConfigurationError

#: Redundancy version of every transmission; no retransmissions are run.
RV = 0
#: Highest effective code rate accepted for an allocation.
MAX_CODE_RATE = 0.95


@dataclass
class TxSlot:
    """What was sent in one slot, kept for scoring the receiver."""

    payload: np.ndarray
    #: Rate-matched bits before scrambling, in codeword order.
    coded: np.ndarray
    grid: waveform.ResourceGrid
    signal: waveform.TimeSignal


@dataclass
class TrialOutcome:
    """Counters of one received slot. Adding outcomes is order-free."""

    blocks: int = 0
    block_errors: int = 0
    bits_pre: int = 0
    bit_errors_pre: int = 0
    bits_post: int = 0
    bit_errors_post: int = 0
    evm_pct: float = 0.0
    iterations: int = 0
    snr_est_db: float | None = None
    #: Channel estimate arrays, only when dumping was requested.
    estimates: dict = field(default_factory=dict, repr=False)


class LinkManager:
    """Owns everything fixed for a sweep: code, filter, pilots, profile.

    Building a manager does the expensive, SNR-independent work once
    (code lifting, ``D^-1 C``, filter design, covariance eigenvectors);
    :meth:`run_slot` is then called once per trial.
    """

    def __init__(self, cfg, mcs) -> None:
        self.cfg = cfg
        self.mcs = mcs
        self.num = cfg.numerology
        self.pusch = cfg.pusch
        self.pusch.check(self.num)
        self.modulation = waveform.Modulation.from_name(mcs.modulation)
        self.tbs = cfg.tbs or mcs.tbs
        self.tb_crc = transport.tb_crc_kind(self.tbs)
        self.bg = transport.select_base_graph(self.tbs, mcs.target_rate)
        self.layout = transport.segment(
            np.zeros(self.tbs + self.tb_crc.length, dtype=np.uint8),
            self.bg,
            self.tb_crc,
        )
        q_m = self.modulation.bits_per_symbol
        g = self.pusch.coded_bits(q_m)
        rate = self.layout.count * self.layout.k_prime / g
        if rate > MAX_CODE_RATE:
            raise ConfigurationError(
                f'TBS {self.tbs} needs code rate {rate:.3f} on {g} coded '
                f'bits; the allocation is too small'
            )
        self.block_lengths = transport.split_rate_matching(
            g, self.layout.count, q_m, self.pusch.n_layers
        )
        self.code = ldpc.get_code(self.bg, self.layout.z)
        self.dmrs = waveform.generate_dmrs(self.pusch)
        self.c_init = waveform.data_c_init(self.pusch)
        self.tx_filter = None
        if cfg.tx_filter:
            self.tx_filter = waveform.design_tx_filter(
                self.num, cfg.n_prb, cfg.bandwidth_hz, cfg.filter_taps
            )
        self.profile = None
        if cfg.channel.upper() != 'AWGN':
            self.profile = channel.load_tdl_profile(cfg.channel)
        self.covariance = None
        if cfg.estimator.upper() == 'MMSE':
            self.covariance = receiver.uniform_pdp_covariance(
                self.dmrs.positions[0].size,
                self.pusch.dmrs_spacing,
                self.num.n_fft,
                self.num.short_cp,
            )
        log(
            'link ready: MCS %d, TBS %d, %s, C=%d, Z=%d, rate %.3f',
            mcs.index,
            self.tbs,
            self.bg.value,
            self.layout.count,
            self.layout.z,
            rate,
        )

    # ================= Public API =================================
    @property
    def checksums(self):
        """SHA-256 of every packaged asset this link was built from."""
        bg = self.code.bg
        sums = {f'{bg.id.value.lower()}_set{bg.set_index}': bg.checksum}
        if self.profile is not None:
            sums[self.profile.name.lower()] = self.profile.checksum
        return sums

    def transmit(self, rng):
        """Random payload through the whole transmit chain."""
        payload = rng.integers(0, 2, self.tbs, dtype=np.uint8)
        tb = transport.attach_crc(payload, self.tb_crc)
        cbs = transport.segment(tb, self.bg, self.tb_crc)
        words = ldpc.encode(self.code, cbs.blocks)
        q_m = self.modulation.bits_per_symbol
        coded = np.concatenate(
            [
                transport.rate_match(words[r], cbs, RV, e, q_m)
                for r, e in enumerate(self.block_lengths)
            ]
        )
        symbols = waveform.map_symbols(
            waveform.scramble(coded, self.c_init), self.modulation
        )
        grid = waveform.build_grid(symbols, self.pusch, self.dmrs)
        sig = waveform.ofdm_modulate(grid, self.num)
        if self.tx_filter is not None:
            sig = waveform.apply_filter(sig, self.tx_filter)
        return TxSlot(payload=payload, coded=coded, grid=grid, signal=sig)

    def propagate(self, tx, snr_db, rng):
        """Fading (or the identity channel), offsets and noise.

        :returns: The received signal and the channel realization.
        """
        sig = tx.signal
        if self.profile is None:
            real = channel.ChannelRealization.identity(
                self.cfg.n_rx, sig.n_antennas, sig.sample_rate
            )
        else:
            real = channel.generate_fading(
                self.profile,
                self.cfg.doppler_hz,
                self.cfg.n_rx,
                sig.n_antennas,
                sig.samples.shape[-1],
                sig.sample_rate,
                rng,
            )
        impairments = channel.ImpairmentSpec(
            snr_db=snr_db,
            cfo_hz=self.cfg.cfo_hz,
            sto_samples=self.cfg.sto_samples,
        )
        return channel.apply_channel(sig, real, impairments, rng), real

    def receive(self, rx, tx, real=None, dump=False):
        """Demodulate, estimate, equalise, decode and score one slot.

        :param real: Channel realization; required in genie mode.
        :param dump: Keep the channel estimate on the outcome.
        """
        cfg = self.cfg
        grid = waveform.ofdm_demodulate(rx, self.num, self.pusch.n_sc)
        if cfg.genie:
            est, snr = self._genie(rx, grid, real)
        else:
            if cfg.sync:
                sync = receiver.estimate_sync(
                    grid, self.dmrs, self.num, self.pusch.dmrs_spacing
                )
                grid = receiver.correct_sync(grid, sync, self.num)
            est = receiver.estimate_ls(grid, self.dmrs)
            snr = receiver.estimate_snr(est)
            if self.covariance is not None:
                est = receiver.estimate_mmse(est, snr.rho, self.covariance)
            est = receiver.interpolate_estimate(est, self.pusch.n_sc)

        eq = receiver.equalize_mmse(
            grid, est, 1 / snr.noise_var, self.pusch.data_symbols
        )
        llr = receiver.demap_codeword(eq, self.modulation)
        llr = waveform.descramble_llr(llr, self.c_init)
        outcome = self._decode(llr, tx)
        outcome.evm_pct = receiver.dmrs_evm(grid, est, self.dmrs)
        outcome.snr_est_db = float(snr.db)
        if dump:
            outcome.estimates = {'h': est.full, 'rho': snr.rho}
        return outcome

    def run_slot(self, snr_db, rng, dump=False):
        tx = self.transmit(rng)
        rx, real = self.propagate(tx, snr_db, rng)
        return self.receive(rx, tx, real, dump=dump)

    # ================= Private API ================================

    def _genie(self, rx, grid, real):
        if real is None:
            raise ValueError('genie reception needs the channel realization')
        h = channel.frequency_response(
            real,
            self.num.n_fft,
            self.pusch.n_sc,
            grid.window_starts,
            self.tx_filter,
        )
        if self.cfg.sto_samples:
            k = waveform.subcarrier_offsets(self.pusch.n_sc)
            shift = self.cfg.sto_samples / self.num.n_fft
            h = h * np.exp(-2j * np.pi * k * shift)
        return receiver.genie_estimate(h, rx.noise_var, self.dmrs)

    def _decode(self, llr, tx):
        q_m = self.modulation.bits_per_symbol
        layout = self.layout
        bounds = np.cumsum([0] + self.block_lengths)
        words = np.stack(
            [
                transport.decoder_input(
                    transport.rate_recover(
                        llr[bounds[r] : bounds[r + 1]],
                        layout,
                        RV,
                        q_m,
                        e=self.block_lengths[r],
                    ),
                    layout,
                )
                for r in range(layout.count)
            ]
        )
        result = ldpc.decode(
            self.code,
            words,
            max_iters=self.cfg.max_iters,
            mode=self.cfg.decoder_mode,
            filler=layout.filler_mask(),
        )
        deseg = transport.desegment(result.info_bits(self.code.k), layout)
        payload = deseg.tb[: self.tbs]
        return TrialOutcome(
            blocks=layout.count,
            block_errors=int(np.count_nonzero(~deseg.block_ok)),
            bits_pre=tx.coded.size,
            bit_errors_pre=int(np.count_nonzero((llr <= 0) != tx.coded)),
            bits_post=self.tbs,
            bit_errors_post=int(np.count_nonzero(payload != tx.payload)),
            iterations=int(np.sum(result.iterations)),
        )
