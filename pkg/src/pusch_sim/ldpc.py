"""Quasi-cyclic LDPC codes of the NR data channel.

A code is built from one of the two base graphs by replacing every
non-null entry with a circulant permutation of size ``Z_c``. Encoding uses
the approximate lower-triangular split ``H = [[C, D, 0], [A, B, I]]``,
decoding is flooding sum-product over the log-likelihood ratios.
"""
import functools
from dataclasses import dataclass
from enum import Enum

import galois
import numpy as np
from scipy import sparse

from . import assets
from .debug import log, timed
from .errors import AssetError, CodeConstructionError, LengthMismatchError
from .models import get_cache

#: Lifting sizes of the eight lifting sets, indexed by set index.
LIFTING_SETS = (
    (2, 4, 8, 16, 32, 64, 128, 256),
    (3, 6, 12, 24, 48, 96, 192, 384),
    (5, 10, 20, 40, 80, 160, 320),
    (7, 14, 28, 56, 112, 224),
    (9, 18, 36, 72, 144, 288),
    (11, 22, 44, 88, 176, 352),
    (13, 26, 52, 104, 208),
    (15, 30, 60, 120, 240),
)

#: Saturation bound of every LLR the decoder handles.
L_MAX = 64.0
DEFAULT_MAX_ITERS = 20

#: Parity-check matrix of the 4x8 code used to check the decoder against
#: exhaustive maximum-likelihood decoding.
TOY_PARITY_CHECK = np.array(
    [
        [1, 1, 0, 0, 1, 0, 0, 0],
        [0, 0, 1, 0, 1, 1, 0, 0],
        [1, 0, 0, 1, 0, 1, 1, 0],
        [0, 1, 1, 1, 0, 0, 0, 1],
    ],
    dtype=np.uint8,
)
TOY_GAP = 2


class BaseGraphId(str, Enum):
    BG1 = 'BG1'
    BG2 = 'BG2'

    @property
    def shape(self):
        return (46, 68) if self is BaseGraphId.BG1 else (42, 52)

    @property
    def info_columns(self):
        return 22 if self is BaseGraphId.BG1 else 10


class BoxplusMode(str, Enum):
    EXACT = 'exact'
    TWO_PIECE = 'two_piece'


@dataclass(frozen=True, eq=False)
class BaseGraph:
    """Shift table of a base graph for one lifting set.

    ``shifts[i, j]`` is the circulant shift of entry ``(i, j)`` or -1 for a
    null entry.
    """

    id: BaseGraphId
    set_index: int
    shifts: np.ndarray
    checksum: str

    @property
    def n_entries(self):
        return int(np.count_nonzero(self.shifts >= 0))


def lifting_set_index(z):
    """Index of the lifting set containing ``z``."""
    for index, sizes in enumerate(LIFTING_SETS):
        if z in sizes:
            return index
    raise CodeConstructionError(f'{z} is not a valid lifting size')


def load_base_graph(asset, bg_id, checksum, set_index=0):
    """Parse a base-graph asset.

    :param asset: Raw CSV bytes, one ``i,j,V`` line per non-null entry.
    :param bg_id: Which base graph the asset describes.
    :param checksum: Expected SHA-256 of ``asset``.
    :param set_index: Lifting set the shift values belong to.
    """
    bg_id = BaseGraphId(bg_id)
    name = f'{bg_id.value} set {set_index}'
    assets.verify_checksum(asset, checksum, name)
    rows, cols = bg_id.shape
    shifts = np.full((rows, cols), -1, dtype=np.int64)
    max_i = max_j = -1
    for i, j, v in assets.parse_csv_rows(asset, name, 3):
        i, j, v = int(i), int(j), int(v)
        if not (0 <= i < rows and 0 <= j < cols) or v < 0:
            raise AssetError(
                f'dimension mismatch in {name}: entry ({i}, {j}) outside '
                f'{rows}x{cols}'
            )
        if shifts[i, j] >= 0:
            raise AssetError(f'duplicate entry ({i}, {j}) in {name}')
        shifts[i, j] = v
        max_i, max_j = max(max_i, i), max(max_j, j)
    if (max_i + 1, max_j + 1) != (rows, cols):
        raise AssetError(
            f'dimension mismatch in {name}: entries span '
            f'{max_i + 1}x{max_j + 1}, expected {rows}x{cols}'
        )
    return BaseGraph(bg_id, set_index, shifts, checksum)


@functools.lru_cache(maxsize=None)
def read_base_graph(bg_id, set_index):
    """Load the packaged base graph of ``bg_id`` for a lifting set."""
    bg_id = BaseGraphId(bg_id)
    stem = f'{bg_id.value.lower()}_set{set_index}'
    meta = assets.read_sidecar('basegraphs', f'{stem}.json')
    if (meta['rows'], meta['cols']) != bg_id.shape:
        raise AssetError(f'dimension mismatch in sidecar of {stem}')
    data = assets.read_bytes('basegraphs', f'{stem}.csv')
    log('loading base graph %s', stem)
    return load_base_graph(data, bg_id, meta['sha256'], set_index)


def _lift(bg, z):
    """Expand a base graph into a sparse binary matrix."""
    i, j = np.nonzero(bg.shifts >= 0)
    shifts = bg.shifts[i, j] % z
    r = np.arange(z)
    rows = (i[:, None] * z + r[None, :]).ravel()
    cols = (j[:, None] * z + (r[None, :] + shifts[:, None]) % z).ravel()
    rows_n, cols_n = bg.shifts.shape
    data = np.ones(rows.size, dtype=np.uint8)
    return sparse.csr_matrix(
        (data, (rows, cols)), shape=(rows_n * z, cols_n * z)
    )


class DecoderGraph:
    """Edge bookkeeping for message passing on a parity-check matrix.

    Edges are numbered in row-major order of ``H``. ``check_table`` lists
    the edges of every check, padded with the index ``n_edges`` which
    points at a neutral +L_MAX message.
    """

    def __init__(self, h):
        h = h.tocsr()
        h.sort_indices()
        m, n = h.shape
        degrees = np.diff(h.indptr)
        if degrees.min(initial=2) < 2:
            raise CodeConstructionError('every check needs degree >= 2')
        self.n_edges = int(h.nnz)
        self.edge_cols = h.indices.astype(np.int64)
        self.edge_check = np.repeat(np.arange(m), degrees)
        self.edge_slot = np.arange(self.n_edges) - h.indptr[self.edge_check]
        self.max_degree = int(degrees.max())
        self.check_table = np.full((m, self.max_degree), self.n_edges)
        self.check_table[self.edge_check, self.edge_slot] = np.arange(
            self.n_edges
        )
        #: (n, n_edges) incidence used to sum messages per variable node.
        self.var_incidence = sparse.csr_matrix(
            (
                np.ones(self.n_edges),
                (self.edge_cols, np.arange(self.n_edges)),
            ),
            shape=(n, self.n_edges),
        )


@dataclass(eq=False)
class LdpcCode:
    """A lifted code with its encoding partition.

    ``h`` is ``m x n``; the first ``k`` columns are systematic, the next
    ``g`` hold the core parity bits and the last ``m - g`` the extension
    parity bits.
    """

    h: sparse.csr_matrix
    g: int
    dinv_c: np.ndarray
    bg: BaseGraph | None = None
    z: int | None = None

    @property
    def m(self):
        return self.h.shape[0]

    @property
    def n(self):
        return self.h.shape[1]

    @property
    def k(self):
        return self.n - self.m

    @functools.cached_property
    def a_mat(self):
        return self.h[self.g :, : self.k].tocsr()

    @functools.cached_property
    def b_mat(self):
        return self.h[self.g :, self.k : self.k + self.g].tocsr()

    @functools.cached_property
    def graph(self):
        return DecoderGraph(self.h)

    @classmethod
    def from_parity_check(cls, h, g, bg=None, z=None, dinv_c=None):
        """Build a code from an explicit parity-check matrix.

        :param h: Binary ``m x n`` matrix, dense or sparse.
        :param g: Number of core parity bits (rows of ``[C D E]``).
        """
        h = sparse.csr_matrix(h, dtype=np.uint8)
        m, n = h.shape
        k = n - m
        if not 0 < g <= m or k <= 0:
            raise CodeConstructionError(f'bad partition g={g} for {m}x{n}')
        e_block = h[:g, k + g :]
        if e_block.nnz:
            raise CodeConstructionError('E block of the partition not zero')
        t_block = h[g:, k + g :].toarray()
        if not np.array_equal(t_block, np.eye(m - g, dtype=np.uint8)):
            raise CodeConstructionError('T block of the partition not I')
        if dinv_c is None:
            dinv_c = _dinv_c(h, g, k)
        return cls(h=h, g=g, dinv_c=dinv_c, bg=bg, z=z)


def _dinv_c(h, g, k):
    """Solve ``D X = C`` over GF(2) by Gauss-Jordan elimination."""
    d_block = h[:g, k : k + g].toarray()
    c_block = h[:g, :k].toarray()
    try:
        d_inv = np.linalg.inv(galois.GF2(d_block))
    except np.linalg.LinAlgError:
        raise CodeConstructionError('D block is singular over GF(2)') from None
    # Integer counts stay below 2**24, so float32 products are exact.
    d_inv = d_inv.view(np.ndarray).astype(np.float32)
    prod = d_inv @ c_block.astype(np.float32)
    return (prod.astype(np.int64) % 2).astype(np.uint8)


_codes = {}


def build_code(bg, z):
    """Lift ``bg`` by ``z`` and precompute the encoder matrices.

    Codes are memoised per process; ``D^-1 C`` is also kept in the disk
    cache, keyed by base graph, set, lifting size and asset checksum.
    """
    if z not in LIFTING_SETS[bg.set_index]:
        raise CodeConstructionError(
            f'Z_c={z} is not in lifting set {bg.set_index}'
        )
    key = (bg.id.value, bg.set_index, z, bg.checksum)
    if (code := _codes.get(key)) is not None:
        return code

    h = _lift(bg, z)
    g = 4 * z
    k = h.shape[1] - h.shape[0]
    cache = get_cache()
    cache_key = 'dinvc:' + ':'.join(str(p) for p in key)
    dinv_c = None
    if cache is not None and (packed := cache.get(cache_key)) is not None:
        log('D^-1 C cache hit for %s', cache_key)
        dinv_c = np.unpackbits(packed, axis=1, count=k)
    if dinv_c is None:
        with timed(f'D^-1 C for {bg.id.value} Z={z}'):
            dinv_c = _dinv_c(h, g, k)
        if cache is not None:
            cache.set(cache_key, np.packbits(dinv_c, axis=1))
    code = LdpcCode.from_parity_check(h, g, bg=bg, z=z, dinv_c=dinv_c)
    _codes[key] = code
    return code


def get_code(bg_id, z):
    """Code for base graph ``bg_id`` lifted by ``z`` from packaged assets."""
    return build_code(read_base_graph(bg_id, lifting_set_index(z)), z)


def toy_code():
    """The 4x8 code with a 2-row core, small enough for ML decoding."""
    return LdpcCode.from_parity_check(TOY_PARITY_CHECK, TOY_GAP)


def _as_batch(values, length, what):
    values = np.asarray(values)
    if values.shape[-1:] != (length,):
        raise LengthMismatchError(
            f'{what} must have length {length}, got {values.shape[-1:]}'
        )
    return values.reshape(-1, length)


def encode(code, bits):
    """Systematic encoding of ``k`` information bits (or a batch of them).

    :returns: Codeword(s) ``[s, p1, p2]`` of length ``n``.
    """
    bits = np.asarray(bits)
    s = _as_batch(bits, code.k, 'information block').astype(np.uint8)
    p1 = s.astype(np.float32) @ code.dinv_c.T.astype(np.float32)
    p1 = (p1.astype(np.int64) % 2).astype(np.uint8)
    p2 = code.a_mat @ s.T.astype(np.int64) + code.b_mat @ p1.T.astype(
        np.int64
    )
    p2 = (np.asarray(p2).T % 2).astype(np.uint8)
    d = np.concatenate([s, p1, p2], axis=1)
    return d.reshape(bits.shape[:-1] + (code.n,))


def syndrome(code, bits):
    """Per-check parity of ``bits``; all False for a codeword."""
    bits = np.asarray(bits)
    d = _as_batch(bits, code.n, 'codeword').astype(np.int64)
    s = np.asarray(code.h @ d.T).T % 2
    return s.astype(bool).reshape(bits.shape[:-1] + (code.m,))


def is_codeword(code, bits):
    return ~syndrome(code, bits).any(axis=-1)


def _correction(x, mode):
    x = np.abs(x)
    if mode is BoxplusMode.EXACT:
        return np.log1p(np.exp(-x))
    return np.maximum(0.6 - 0.24 * x, 0.0)


def boxplus(a, b, mode=BoxplusMode.EXACT):
    """Pairwise check-node combination of two LLRs.

    A zero LLR counts as positive for the sign product.
    """
    mode = BoxplusMode(mode)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sign = np.where(a < 0, -1.0, 1.0) * np.where(b < 0, -1.0, 1.0)
    return (
        sign * np.minimum(np.abs(a), np.abs(b))
        + _correction(a + b, mode)
        - _correction(a - b, mode)
    )


def _check_update(v2c, graph, mode):
    """Extrinsic check-to-variable messages, forward-backward per check."""
    batch = v2c.shape[0]
    padded = np.concatenate([v2c, np.full((batch, 1), L_MAX)], axis=1)
    msgs = padded[:, graph.check_table]
    d = graph.max_degree
    fwd = np.empty_like(msgs)
    bwd = np.empty_like(msgs)
    fwd[..., 0] = msgs[..., 0]
    for j in range(1, d):
        fwd[..., j] = boxplus(fwd[..., j - 1], msgs[..., j], mode)
    bwd[..., d - 1] = msgs[..., d - 1]
    for j in range(d - 2, -1, -1):
        bwd[..., j] = boxplus(bwd[..., j + 1], msgs[..., j], mode)
    ext = np.empty_like(msgs)
    ext[..., 0] = bwd[..., 1]
    ext[..., d - 1] = fwd[..., d - 2]
    for j in range(1, d - 1):
        ext[..., j] = boxplus(fwd[..., j - 1], bwd[..., j + 1], mode)
    return np.clip(ext[:, graph.edge_check, graph.edge_slot], -L_MAX, L_MAX)


@dataclass
class DecodeResult:
    """Decisions of :func:`decode`.

    For a single input word the fields are scalars, for a batch they carry
    the batch shape.
    """

    bits: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray

    def info_bits(self, k):
        return self.bits[..., :k]


def decode(
    code,
    llr,
    max_iters=DEFAULT_MAX_ITERS,
    mode=BoxplusMode.TWO_PIECE,
    filler=None,
):
    """Flooding sum-product decoding.

    Positive LLRs favour bit 0. Every word of a batch stops at the first
    iteration whose hard decision satisfies all checks; later iterations
    of other words don't touch it.

    :param llr: Channel LLRs, shape ``(..., n)``.
    :param filler: Optional boolean mask of length ``n`` of known-zero
        positions, forced to +L_MAX before decoding.
    """
    if max_iters < 1:
        raise ValueError('max_iters must be at least 1')
    mode = BoxplusMode(mode)
    llr = np.asarray(llr, dtype=np.float64)
    batch_shape = llr.shape[:-1]
    lam = np.clip(_as_batch(llr, code.n, 'LLR word'), -L_MAX, L_MAX)
    if filler is not None:
        lam = lam.copy()
        lam[:, np.asarray(filler, dtype=bool)] = L_MAX
    graph = code.graph
    batch = lam.shape[0]

    v2c = lam[:, graph.edge_cols]
    bits = (lam <= 0).astype(np.uint8)
    converged = np.zeros(batch, dtype=bool)
    iterations = np.zeros(batch, dtype=np.int64)
    active = np.arange(batch)
    for it in range(1, max_iters + 1):
        c2v = _check_update(v2c[active], graph, mode)
        total = lam[active] + (graph.var_incidence @ c2v.T).T
        total = np.clip(total, -L_MAX, L_MAX)
        v2c[active] = np.clip(
            total[:, graph.edge_cols] - c2v, -L_MAX, L_MAX
        )
        hard = (total <= 0).astype(np.uint8)
        ok = is_codeword(code, hard)
        bits[active] = hard
        iterations[active] = it
        converged[active] = ok
        active = active[~ok]
        if active.size == 0:
            break
    log(
        'decoded %d word(s): %d converged, max %d iterations',
        batch,
        int(converged.sum()),
        int(iterations.max(initial=0)),
    )
    return DecodeResult(
        bits=bits.reshape(batch_shape + (code.n,)),
        converged=converged.reshape(batch_shape),
        iterations=iterations.reshape(batch_shape),
    )


def codebook(code):
    """Every codeword of a small code, one per row."""
    if code.k > 16:
        raise ValueError('codebook enumeration is limited to k <= 16')
    info = (np.arange(2**code.k)[:, None] >> np.arange(code.k)[::-1]) & 1
    return encode(code, info.astype(np.uint8))


def ml_decode(code, llr):
    """Exhaustive maximum-likelihood decision for a small code."""
    words = codebook(code)
    llr = np.asarray(llr, dtype=np.float64)
    metric = llr @ (1.0 - 2.0 * words.T)
    return words[np.argmax(metric, axis=-1)]


#: Lifting sizes exercised by :func:`self_test`, one per lifting set.
SELFTEST_SIZES = (2, 6, 20, 28, 36, 44, 104, 384)
SELFTEST_QUICK_SIZES = (2, 15)


@dataclass
class SelfTestResult:
    bg: BaseGraphId
    z: int
    words: int
    encode_failures: int
    decode_failures: int

    @property
    def ok(self):
        return not (self.encode_failures or self.decode_failures)


def self_test(sizes=SELFTEST_SIZES, words=20, llr_magnitude=10.0, seed=0):
    """Encode random blocks, check parity, decode from clean LLRs.

    Yields one :class:`SelfTestResult` per base graph and lifting size.
    """
    rng = np.random.default_rng(seed)
    for bg_id in BaseGraphId:
        for z in sizes:
            code = get_code(bg_id, z)
            info = rng.integers(0, 2, (words, code.k), dtype=np.uint8)
            d = encode(code, info)
            bad_words = int(np.count_nonzero(~is_codeword(code, d)))
            llr = llr_magnitude * (1.0 - 2.0 * d)
            result = decode(code, llr, max_iters=5)
            wrong = np.any(result.bits != d, axis=-1)
            yield SelfTestResult(
                bg=bg_id,
                z=z,
                words=words,
                encode_failures=bad_words,
                decode_failures=int(np.count_nonzero(wrong)),
            )
