"""Transport-block processing between the MAC payload and the LDPC codec.

CRC attachment, code-block segmentation and the circular-buffer rate
matching, with their receive-side inverses.
"""
import functools
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .debug import log
from .errors import ConfigurationError, LengthMismatchError
from .ldpc import L_MAX, LIFTING_SETS, BaseGraphId

#: Largest code block per base graph.
MAX_BLOCK_SIZE = {BaseGraphId.BG1: 8448, BaseGraphId.BG2: 3840}
#: Transport blocks up to this size carry a 16-bit CRC.
SMALL_TB_LIMIT = 3824
BLOCK_CRC_LEN = 24

#: Numerators and denominator of the redundancy-version start offsets.
_K0_FRACTIONS = {
    BaseGraphId.BG1: ((0, 17, 33, 56), 66),
    BaseGraphId.BG2: ((0, 13, 25, 43), 50),
}

_ALL_LIFTING_SIZES = tuple(sorted(z for s in LIFTING_SETS for z in s))


class CrcKind(Enum):
    CRC24A = (0x864CFB, 24)
    CRC24B = (0x800063, 24)
    CRC16 = (0x1021, 16)

    @property
    def poly(self):
        return self.value[0]

    @property
    def length(self):
        return self.value[1]


@functools.lru_cache(maxsize=None)
def _crc_table(kind):
    width, poly = kind.length, kind.poly
    top = 1 << (width - 1)
    mask = (1 << width) - 1
    table = []
    for byte in range(256):
        reg = byte << (width - 8)
        for _ in range(8):
            reg = ((reg << 1) ^ poly) if reg & top else (reg << 1)
        table.append(reg & mask)
    return tuple(table)


def crc_remainder(bits, kind):
    """Remainder of ``bits(D) * D^L`` divided by the generator, as bits."""
    bits = np.asarray(bits, dtype=np.uint8)
    width, poly = kind.length, kind.poly
    mask = (1 << width) - 1
    table = _crc_table(kind)
    n_bytes = bits.size // 8
    reg = 0
    for byte in np.packbits(bits[: n_bytes * 8]).tolist():
        reg = ((reg << 8) & mask) ^ table[((reg >> (width - 8)) ^ byte) & 0xFF]
    for bit in bits[n_bytes * 8 :].tolist():
        feedback = ((reg >> (width - 1)) & 1) ^ bit
        reg = (reg << 1) & mask
        if feedback:
            reg ^= poly
    shifts = np.arange(width - 1, -1, -1)
    return ((reg >> shifts) & 1).astype(np.uint8)


def attach_crc(bits, kind):
    """Append the parity bits of ``kind`` to ``bits``."""
    bits = np.asarray(bits, dtype=np.uint8)
    return np.concatenate([bits, crc_remainder(bits, kind)])


def check_crc(bits, kind):
    """True if ``bits`` (payload followed by parity) passes the CRC."""
    return not crc_remainder(bits, kind).any()


def tb_crc_kind(tbs):
    return CrcKind.CRC16 if tbs <= SMALL_TB_LIMIT else CrcKind.CRC24A


def select_base_graph(tbs, rate):
    """Base graph for a transport block of ``tbs`` bits at code rate."""
    if tbs <= 292 or (tbs <= SMALL_TB_LIMIT and rate <= 0.67) or rate <= 0.25:
        return BaseGraphId.BG2
    return BaseGraphId.BG1


def _info_columns(bg, b):
    if bg is BaseGraphId.BG1:
        return 22
    if b > 640:
        return 10
    if b > 560:
        return 9
    if b > 192:
        return 8
    return 6


@dataclass
class CodeBlockSet:
    """Code blocks of one transport block, ready for the encoder.

    ``blocks`` is ``C x K``. Each row holds ``pad_bits`` leading zeros on
    the first block only, the payload, the block CRC when ``C > 1`` and
    ``filler_count`` trailing filler positions (zeros).
    """

    blocks: np.ndarray
    bg: BaseGraphId
    z: int
    k_prime: int
    crc_len: int
    pad_bits: int
    tb_size: int
    tb_crc: CrcKind | None = None

    @property
    def count(self):
        return self.blocks.shape[0]

    @property
    def k(self):
        return self.blocks.shape[1]

    @property
    def filler_count(self):
        return self.k - self.k_prime

    @property
    def n(self):
        cols = 68 if self.bg is BaseGraphId.BG1 else 52
        return cols * self.z

    @property
    def n_cb(self):
        """Circular buffer length: codeword minus the punctured prefix."""
        return self.n - 2 * self.z

    def filler_mask(self):
        """Filler positions within a full codeword of length ``n``."""
        mask = np.zeros(self.n, dtype=bool)
        mask[self.k_prime : self.k] = True
        return mask


def segment(tb, bg, tb_crc=None):
    """Split a transport block (with its CRC) into code blocks.

    :param tb: Transport-block bits including the transport CRC.
    :param bg: Base graph chosen for the block.
    :param tb_crc: CRC kind of ``tb``; only recorded for desegmentation.
    """
    tb = np.asarray(tb, dtype=np.uint8)
    bg = BaseGraphId(bg)
    b = tb.size
    if b == 0:
        raise LengthMismatchError('empty transport block')
    k_cb = MAX_BLOCK_SIZE[bg]
    if b <= k_cb:
        crc_len, count = 0, 1
    else:
        crc_len = BLOCK_CRC_LEN
        count = math.ceil(b / (k_cb - crc_len))
    b_prime = b + count * crc_len
    k_prime = math.ceil(b_prime / count)
    pad = count * k_prime - b_prime

    k_b = _info_columns(bg, b)
    z = next((z for z in _ALL_LIFTING_SIZES if k_b * z >= k_prime), None)
    if z is None:
        raise ConfigurationError(f'no lifting size fits K\'={k_prime}')
    k = bg.info_columns * z

    payload = np.concatenate([np.zeros(pad, dtype=np.uint8), tb])
    per_block = k_prime - crc_len
    blocks = np.zeros((count, k), dtype=np.uint8)
    for r in range(count):
        chunk = payload[r * per_block : (r + 1) * per_block]
        if crc_len:
            chunk = attach_crc(chunk, CrcKind.CRC24B)
        blocks[r, :k_prime] = chunk
    log(
        'segmented %d bits: %s C=%d K\'=%d K=%d Z=%d',
        b,
        bg.value,
        count,
        k_prime,
        k,
        z,
    )
    return CodeBlockSet(
        blocks=blocks,
        bg=bg,
        z=z,
        k_prime=k_prime,
        crc_len=crc_len,
        pad_bits=pad,
        tb_size=b,
        tb_crc=tb_crc,
    )


@dataclass
class Desegmented:
    tb: np.ndarray
    block_ok: np.ndarray
    tb_ok: bool | None


def desegment(blocks, cbs):
    """Reassemble decoded information blocks into the transport block.

    :param blocks: ``C x K`` (or longer rows) of decided bits.
    :returns: The transport bits (with CRC), per-block CRC flags and, if
        the transport CRC kind is known, the transport CRC flag. A single
        block has no own CRC, so its flag is the transport CRC result.
    """
    blocks = np.asarray(blocks, dtype=np.uint8)
    if blocks.ndim != 2 or blocks.shape[0] != cbs.count:
        raise LengthMismatchError(
            f'expected {cbs.count} decoded blocks, got {blocks.shape}'
        )
    per_block = cbs.k_prime - cbs.crc_len
    parts = []
    block_ok = np.ones(cbs.count, dtype=bool)
    for r in range(cbs.count):
        if cbs.crc_len:
            block_ok[r] = check_crc(blocks[r, : cbs.k_prime], CrcKind.CRC24B)
        parts.append(blocks[r, :per_block])
    tb = np.concatenate(parts)[cbs.pad_bits :]
    tb_ok = None
    if cbs.tb_crc is not None:
        tb_ok = check_crc(tb, cbs.tb_crc)
        if cbs.count == 1:
            block_ok[0] = tb_ok
    return Desegmented(tb=tb, block_ok=block_ok, tb_ok=tb_ok)


def k0(bg, rv, n_cb, z):
    """Start position of redundancy version ``rv`` in the circular buffer."""
    if rv not in (0, 1, 2, 3):
        raise ValueError(f'redundancy version must be 0..3, got {rv}')
    nums, den = _K0_FRACTIONS[BaseGraphId(bg)]
    return (nums[rv] * n_cb // (den * z)) * z


def split_rate_matching(g, count, q_m, n_layers):
    """Rate-matched length of every code block out of ``g`` coded bits."""
    unit = n_layers * q_m
    if g % unit:
        raise LengthMismatchError(
            f'{g} coded bits is not a multiple of {unit}'
        )
    symbols = g // unit
    low, high = symbols // count, -(-symbols // count)
    n_low = count - symbols % count
    return [unit * (low if r < n_low else high) for r in range(count)]


def _read_order(cbs, rv, e):
    """Buffer positions read, in transmission order, for ``e`` bits."""
    n_cb = cbs.n_cb
    start = k0(cbs.bg, rv, n_cb, cbs.z)
    order = (start + np.arange(n_cb)) % n_cb
    filler = cbs.filler_mask()[2 * cbs.z :]
    order = order[~filler[order]]
    return np.resize(order, e)


def rate_match(d, cbs, rv, e, q_m):
    """Select and interleave ``e`` bits of one codeword.

    :param d: Full codeword of length ``n`` (including the 2 Z_c punctured
        systematic bits).
    """
    d = np.asarray(d, dtype=np.uint8)
    if d.shape != (cbs.n,):
        raise LengthMismatchError(f'codeword must have {cbs.n} bits')
    if e % q_m:
        raise LengthMismatchError(f'E={e} is not a multiple of Q_m={q_m}')
    buffer = d[2 * cbs.z :]
    selected = buffer[_read_order(cbs, rv, e)]
    return selected.reshape(q_m, e // q_m).T.ravel()


def rate_recover(llr, cbs, rv, q_m, soft_buffer=None, e=None):
    """Undo interleaving and selection, combining repeated positions.

    :param soft_buffer: Earlier soft buffer of the same block to combine
        with (HARQ); left untouched.
    :param e: Scheduled rate-matched length of the block. When given,
        ``llr`` must hold exactly that many values.
    :returns: Soft buffer of length ``N_cb``, clipped to +-L_MAX, with
        filler positions at +L_MAX and untransmitted positions at 0.
    """
    llr = np.asarray(llr, dtype=np.float64)
    if e is not None and llr.size != e:
        raise LengthMismatchError(
            f'got {llr.size} LLRs for a block scheduled with E={e}'
        )
    e = llr.size
    if e % q_m:
        raise LengthMismatchError(f'E={e} is not a multiple of Q_m={q_m}')
    deinterleaved = llr.reshape(e // q_m, q_m).T.ravel()
    order = _read_order(cbs, rv, e)
    buffer = np.bincount(order, weights=deinterleaved, minlength=cbs.n_cb)
    if soft_buffer is not None:
        if soft_buffer.shape != buffer.shape:
            raise LengthMismatchError('soft buffer length mismatch')
        buffer = buffer + soft_buffer
    buffer = np.clip(buffer, -L_MAX, L_MAX)
    buffer[cbs.filler_mask()[2 * cbs.z :]] = L_MAX
    return buffer


def decoder_input(buffer, cbs):
    """Full-length decoder LLRs: zero for the punctured prefix."""
    return np.concatenate([np.zeros(2 * cbs.z), buffer])
