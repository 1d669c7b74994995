import argparse
import asyncio
import csv
import io
import sys
from pathlib import Path

from textual import work
from textual.app import App, ComposeResult
from textual.widgets import Footer, LoadingIndicator

from . import ldpc, waveform
from .channel import spawn_rng
from .debug import log
from .errors import PuschSimError
from .sim import (
    SimulationManager,
    emit_report,
    format_value,
    get_link,
    load_config,
    write_atomic,
)
from .widgets import PointsTable, SweepStatus

DEFAULT_NOTIFY_TIMEOUT = 2
EXIT_ERROR = 2


class SweepApp(App):
    """Terminal view of a running sweep: one table row per SNR point."""

    BINDINGS = [
        ('d', 'app.toggle_dark', 'Toggle Dark mode'),
        ('s', 'app.screenshot()', 'Screenshot'),
        ('q', 'quit', 'Quit'),
    ]
    TITLE = 'puschsim'
    SUB_TITLE = 'PUSCH link-level BLER sweep'

    def __init__(self, manager, out, *args, **kw):
        super().__init__(*args, **kw)
        self.manager = manager
        self.out = out
        self.report = None

    def compose(self) -> ComposeResult:
        yield SweepStatus(self.manager.cfg, id='status')
        yield LoadingIndicator()
        yield PointsTable(id='points')
        yield Footer()

    def on_mount(self):
        cfg = self.manager.cfg
        self.notify(
            f'{len(cfg.snr_points())} SNR points, up to {cfg.trials} '
            f'trials each',
            title='Sweep starting',
            timeout=DEFAULT_NOTIFY_TIMEOUT,
        )
        self.run_sweep()

    def _add_point(self, row):
        self.query_one(PointsTable).add_point(row)
        self.query_one(SweepStatus).record(row)

    def _finish(self, paths):
        self.query_one(LoadingIndicator).display = False
        self.notify(
            f'Report written to {paths[0]}',
            title='Sweep complete',
            timeout=DEFAULT_NOTIFY_TIMEOUT,
        )

    @work(thread=True, exclusive=True)
    def run_sweep(self):
        # The sweep blocks, so it runs in a thread; widgets are only
        # touched through call_from_thread.
        self.manager.on_point = lambda row: self.call_from_thread(
            self._add_point, row
        )
        self.report = asyncio.run(self.manager.run_sweep())
        paths = emit_report(self.report, self.out)
        self.call_from_thread(self._finish, paths)


def _print_point(row):
    print(
        f'snr {row.snr_db:7.2f} dB  blocks {row.blocks:6d}  '
        f'bler {format_value(row.bler):>10}  '
        f'ber {format_value(row.ber_post):>10}  '
        f'evm {row.evm_pct:6.2f} %'
    )


def cmd_simulate(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    dump_dir = None
    if args.dump_estimates:
        dump_dir = Path(args.out).with_suffix('.estimates')
    manager = SimulationManager(cfg, workers=args.workers, dump_dir=dump_dir)
    if args.tui:
        SweepApp(manager, args.out).run()
        return 0
    manager.on_point = _print_point
    report = asyncio.run(manager.run_sweep())
    csv_path, summary_path = emit_report(report, args.out)
    print(f'wrote {csv_path} and {summary_path}')
    return 0


def cmd_filters_design(args):
    cfg = load_config(args.config)
    num = cfg.numerology
    taps = waveform.design_tx_filter(
        num, cfg.n_prb, cfg.bandwidth_hz, cfg.filter_taps
    )
    freqs, mag_db = waveform.filter_response(taps, num)
    out = Path(args.out)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(('freq_hz', 'magnitude_db'))
    writer.writerows(
        (format_value(float(f)), format_value(float(m)))
        for f, m in zip(freqs, mag_db)
    )
    write_atomic(out, buf.getvalue())

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(('index', 'tap'))
    writer.writerows((i, repr(float(t))) for i, t in enumerate(taps))
    taps_path = out.with_name(out.stem + '_taps.csv')
    write_atomic(taps_path, buf.getvalue())
    print(f'wrote {out} and {taps_path}')
    return 0


def cmd_ldpc_selftest(args):
    sizes = ldpc.SELFTEST_QUICK_SIZES if args.quick else ldpc.SELFTEST_SIZES
    failed = 0
    for result in ldpc.self_test(sizes=sizes):
        status = 'ok' if result.ok else 'FAIL'
        print(
            f'{result.bg.value} Z={result.z:<4d} {status}  '
            f'encode {result.encode_failures}/{result.words}  '
            f'decode {result.decode_failures}/{result.words}'
        )
        failed += not result.ok
    return 1 if failed else 0


def cmd_capture(args):
    cfg = load_config(args.config)
    link = get_link(cfg)
    rng = spawn_rng(cfg.seed, 0, 0)
    tx = link.transmit(rng)
    rx, _ = link.propagate(tx, args.snr, rng)
    files = waveform.export_iq(rx, args.out)
    log('captured %d samples', rx.samples.shape[-1])
    print(f'wrote {len(files)} antenna file(s) to {args.out}')
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog='puschsim', description='5G NR PUSCH link-level simulator.'
    )
    commands = parser.add_subparsers(dest='command', required=True)

    simulate = commands.add_parser('simulate', help='run an SNR sweep')
    simulate.add_argument('--config', required=True)
    simulate.add_argument('--out', required=True, help='report CSV')
    simulate.add_argument('--seed', type=int, default=None)
    simulate.add_argument('--workers', type=int, default=1)
    simulate.add_argument('--dump-estimates', action='store_true')
    simulate.add_argument('--tui', action='store_true')
    simulate.set_defaults(func=cmd_simulate)

    filters = commands.add_parser('filters', help='transmit filter tools')
    filter_commands = filters.add_subparsers(dest='action', required=True)
    design = filter_commands.add_parser('design')
    design.add_argument('--config', required=True)
    design.add_argument('--out', default='filter_response.csv')
    design.set_defaults(func=cmd_filters_design)

    codec = commands.add_parser('ldpc', help='LDPC codec tools')
    codec_commands = codec.add_subparsers(dest='action', required=True)
    selftest = codec_commands.add_parser('selftest')
    selftest.add_argument('--quick', action='store_true')
    selftest.set_defaults(func=cmd_ldpc_selftest)

    capture = commands.add_parser('capture', help='export one received slot')
    capture.add_argument('--config', required=True)
    capture.add_argument('--snr', type=float, required=True)
    capture.add_argument('--out', required=True, help='output directory')
    capture.set_defaults(func=cmd_capture)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        status = args.func(args)
    except PuschSimError as error:
        print(f'puschsim: error: {error}', file=sys.stderr)
        status = EXIT_ERROR
    sys.exit(status)
