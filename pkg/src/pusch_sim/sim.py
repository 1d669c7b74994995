"""Monte-Carlo sweeps over SNR, their reports and config files."""
import asyncio
import csv
import io
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from marshmallow import ValidationError

from .channel import spawn_rng
from .core import LinkManager, TrialOutcome
from .debug import log
from .errors import ConfigurationError
from .models import McsEntry, SimPoint, SimReport
from .schemas import ReportRowSchema, SimConfigSchema

MCS_TABLE = {
    0: McsEntry(0, 'QPSK', 2, 0.117, 7176),
    5: McsEntry(5, 'QPSK', 2, 0.370, 22536),
    10: McsEntry(10, '16QAM', 4, 0.332, 40976),
    15: McsEntry(15, '16QAM', 4, 0.602, 73776),
    20: McsEntry(20, '64QAM', 6, 0.554, 102416),
}

REPORT_COLUMNS = tuple(ReportRowSchema().fields)
#: Trials handed to a worker at once.
CHUNK_SIZE = 8

_links = {}


def lookup_mcs(index):
    try:
        return MCS_TABLE[index]
    except KeyError:
        raise ConfigurationError(
            f'unknown MCS index {index}; known: {sorted(MCS_TABLE)}'
        ) from None


def load_config(path):
    """Read a ``key = value`` config file into a :class:`SimConfig`."""
    raw = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        if not sep or not key.strip():
            raise ConfigurationError(f'{path}:{lineno}: expected key = value')
        key = key.strip()
        if key in raw:
            raise ConfigurationError(f'{path}:{lineno}: duplicate key {key}')
        raw[key] = value.strip()
    try:
        cfg = SimConfigSchema().load(raw)
    except ValidationError as error:
        raise ConfigurationError(f'{path}: {error.messages}') from error
    lookup_mcs(cfg.mcs_index)
    return cfg


def get_link(cfg):
    """Per-process :class:`LinkManager` for ``cfg``, built on first use."""
    key = tuple(cfg.echo())
    if (link := _links.get(key)) is None:
        link = LinkManager(cfg, lookup_mcs(cfg.mcs_index))
        _links[key] = link
    return link


def run_trial(cfg, snr_db, point_index, trial_index, dump=False):
    """One slot at ``snr_db``.

    The random stream depends only on the master seed and the two
    indices, so any process can run any trial.
    """
    rng = spawn_rng(cfg.seed, point_index, trial_index)
    return get_link(cfg).run_slot(snr_db, rng, dump=dump)


def _run_chunk(cfg, snr_db, point_index, start, stop):
    return [
        run_trial(cfg, snr_db, point_index, t) for t in range(start, stop)
    ]


def summarize(snr_db, outcomes, elapsed_s=0.0):
    """Fold trial outcomes into one report row."""
    total = TrialOutcome()
    evm = []
    for o in outcomes:
        total.blocks += o.blocks
        total.block_errors += o.block_errors
        total.bits_pre += o.bits_pre
        total.bit_errors_pre += o.bit_errors_pre
        total.bits_post += o.bits_post
        total.bit_errors_post += o.bit_errors_post
        total.iterations += o.iterations
        evm.append(o.evm_pct)

    def ratio(num, den):
        return num / den if den else 0.0

    return SimPoint(
        snr_db=snr_db,
        blocks=total.blocks,
        block_errors=total.block_errors,
        bler=ratio(total.block_errors, total.blocks),
        ber_pre=ratio(total.bit_errors_pre, total.bits_pre),
        ber_post=ratio(total.bit_errors_post, total.bits_post),
        evm_pct=float(np.mean(evm)) if evm else 0.0,
        mean_iters=ratio(total.iterations, total.blocks),
        elapsed_s=elapsed_s,
    )


class SimulationManager:
    """Runs sweeps for one config, serially or on a process pool.

    Trials are folded in index order and a point stops at the first trial
    that brings the block errors to ``max_block_errors``. Chunks that
    finished past that trial are discarded, so the report does not depend
    on the number of workers.

    SNR points run one after another; the pool only spreads the trials of
    the current point.
    """

    def __init__(self, cfg, workers=1, dump_dir=None, on_point=None) -> None:
        self.cfg = cfg
        self.workers = max(1, int(workers))
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.on_point = on_point
        self._pool = None

    # ================= Public API =================================
    async def run_point(self, snr_db, point_index=0):
        cfg = self.cfg
        started = time.perf_counter()
        log('point %d: %.2f dB', point_index, snr_db)
        kept = []
        errors = 0
        next_trial = 0
        done = False
        while not done and next_trial < cfg.trials:
            bounds = []
            for _ in range(self.workers):
                if next_trial >= cfg.trials:
                    break
                stop = min(next_trial + CHUNK_SIZE, cfg.trials)
                bounds.append((next_trial, stop))
                next_trial = stop
            chunks = await asyncio.gather(
                *(
                    self._submit(snr_db, point_index, start, stop)
                    for start, stop in bounds
                )
            )
            for outcome in (o for chunk in chunks for o in chunk):
                kept.append(outcome)
                errors += outcome.block_errors
                if errors >= cfg.max_block_errors:
                    log(
                        'point %d stopped early after %d trials',
                        point_index,
                        len(kept),
                    )
                    done = True
                    break
        if self.dump_dir is not None:
            self._dump(snr_db, point_index)
        elapsed = 0.0
        if cfg.record_timing:
            elapsed = round(time.perf_counter() - started, 3)
        row = summarize(snr_db, kept, elapsed)
        if self.on_point is not None:
            self.on_point(row)
        return row

    async def run_sweep(self):
        """Every SNR point of the config, in order."""
        link = get_link(self.cfg)
        report = SimReport(
            config=self.cfg,
            checksums=link.checksums,
            max_iters=self.cfg.max_iters,
        )
        try:
            for i, snr_db in enumerate(self.cfg.snr_points()):
                report.rows.append(await self.run_point(snr_db, i))
        finally:
            self.close()
        return report

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # ================= Private API ================================

    async def _submit(self, snr_db, point_index, start, stop):
        if self.workers == 1:
            return _run_chunk(self.cfg, snr_db, point_index, start, stop)
        if self._pool is None:
            self._pool = ProcessPoolExecutor(max_workers=self.workers)
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(
            self._pool,
            _run_chunk,
            self.cfg,
            snr_db,
            point_index,
            start,
            stop,
        )

    def _dump(self, snr_db, point_index):
        """Save the channel estimate of the point's first trial."""
        outcome = run_trial(self.cfg, snr_db, point_index, 0, dump=True)
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        path = self.dump_dir / f'estimates_p{point_index:03d}.npz'
        np.savez_compressed(
            path,
            h=outcome.estimates['h'],
            rho=outcome.estimates['rho'],
            snr_db=snr_db,
        )
        log('wrote %s', path)


def format_value(value):
    if isinstance(value, float):
        return f'{value:.6g}'
    return str(value)


def write_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.')
    try:
        with os.fdopen(fd, 'w', newline='') as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def report_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(REPORT_COLUMNS)
    schema = ReportRowSchema()
    for row in report.rows:
        data = schema.dump(row)
        writer.writerow([format_value(data[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_summary(report):
    lines = ['# puschsim sweep', '', '## config']
    lines += report.config.echo()
    lines += ['', f'decoder iteration cap = {report.max_iters}', '']
    lines.append('## assets (sha256)')
    lines += [f'{k} = {v}' for k, v in report.checksums.items()]
    lines += ['', '## points']
    header = ' '.join(f'{c:>12}' for c in REPORT_COLUMNS)
    lines.append(header)
    schema = ReportRowSchema()
    for row in report.rows:
        data = schema.dump(row)
        lines.append(
            ' '.join(f'{format_value(data[c]):>12}' for c in REPORT_COLUMNS)
        )
    return '\n'.join(lines) + '\n'


def emit_report(report, path):
    """Write the CSV at ``path`` and ``<path>.summary.txt`` next to it.

    Both files are replaced atomically.
    """
    path = Path(path)
    write_atomic(path, report_csv(report))
    summary = path.with_name(path.name + '.summary.txt')
    write_atomic(summary, report_summary(report))
    log('wrote %s and %s', path, summary)
    return path, summary
