import asyncio
import csv

import pytest

from pusch_sim import app, sim
from pusch_sim.errors import ConfigurationError
from pusch_sim.models import SimConfig
from pusch_sim.widgets import PointsTable, SweepStatus

SMALL = """\
# narrow test link
n_fft = 128
bandwidth_hz = 2.4e6
n_prb = 4
tbs = 200
filter_taps = 31
tx_filter = false
channel = AWGN
snr_start_db = 10
snr_stop_db = 10
trials = 2
record_timing = false
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'small.cfg'
    path.write_text(SMALL)
    return path


def _write(tmp_path, text):
    path = tmp_path / 'test.cfg'
    path.write_text(text)
    return path


def test_load_config(config_file):
    cfg = sim.load_config(config_file)
    assert isinstance(cfg, SimConfig)
    assert cfg.n_fft == 128
    assert cfg.bandwidth_hz == 2.4e6
    assert cfg.tx_filter is False
    assert cfg.channel == 'AWGN'
    assert cfg.snr_points() == [10.0]
    # Keys not in the file keep their defaults.
    assert cfg.n_layers == 2
    assert cfg.dmrs_symbols == (2, 11)


def test_load_config_comments_and_lists(tmp_path):
    path = _write(
        tmp_path,
        'dmrs_symbols = 2, 7 , 11  # three pilots\n\n   # only a comment\n',
    )
    assert sim.load_config(path).dmrs_symbols == (2, 7, 11)


@pytest.mark.parametrize(
    'text, message',
    [
        ('colour = blue\n', 'colour'),
        ('n_prb = 4\nn_prb = 5\n', 'duplicate key n_prb'),
        ('n_prb 4\n', 'expected key = value'),
        ('= 4\n', 'expected key = value'),
        ('n_prb = many\n', 'n_prb'),
        ('dmrs_symbols = 2,x\n', 'comma separated integers'),
        ('decoder_mode = fastest\n', 'decoder_mode'),
        ('snr_start_db = 5\nsnr_stop_db = 0\n', 'snr_stop_db'),
        ('mcs_index = 3\n', 'unknown MCS index'),
    ],
)
def test_load_config_rejects(tmp_path, text, message):
    with pytest.raises(ConfigurationError, match=message):
        sim.load_config(_write(tmp_path, text))


def test_line_numbers_in_errors(tmp_path):
    path = _write(tmp_path, 'n_prb = 4\n# fine\nbroken\n')
    with pytest.raises(ConfigurationError, match=':3:'):
        sim.load_config(path)


def test_echo_round_trips_through_the_loader(tmp_path):
    cfg = SimConfig(n_prb=8, dmrs_symbols=(3,), genie=True, tbs=None)
    lines = [line for line in cfg.echo() if not line.startswith('tbs ')]
    path = _write(tmp_path, '\n'.join(lines) + '\n')
    assert sim.load_config(path) == cfg


def test_snr_points_include_stop():
    cfg = SimConfig(snr_start_db=-1.0, snr_stop_db=1.0, snr_step_db=0.5)
    assert cfg.snr_points() == [-1.0, -0.5, 0.0, 0.5, 1.0]


def test_cli_ldpc_selftest_quick(capsys):
    with pytest.raises(SystemExit) as exc:
        app.main(['ldpc', 'selftest', '--quick'])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert 'FAIL' not in out
    assert 'BG1 Z=2' in out


def test_cli_reports_config_errors(tmp_path, capsys):
    path = _write(tmp_path, 'colour = blue\n')
    with pytest.raises(SystemExit) as exc:
        app.main(['simulate', '--config', str(path), '--out', 'x.csv'])
    assert exc.value.code == 2
    assert capsys.readouterr().err.startswith('puschsim: error:')


def test_cli_filters_design(config_file, tmp_path):
    out = tmp_path / 'resp.csv'
    with pytest.raises(SystemExit) as exc:
        app.main(
            ['filters', 'design', '--config', str(config_file), '--out',
             str(out)]
        )
    assert exc.value.code == 0
    with out.open() as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['freq_hz', 'magnitude_db']
    assert len(rows) == 4097
    taps = (tmp_path / 'resp_taps.csv').read_text().splitlines()
    assert taps[0] == 'index,tap'
    assert len(taps) == 32


def test_cli_simulate(config_file, tmp_path, capsys):
    out = tmp_path / 'report.csv'
    with pytest.raises(SystemExit) as exc:
        app.main(
            ['simulate', '--config', str(config_file), '--out', str(out),
             '--seed', '3']
        )
    assert exc.value.code == 0
    assert out.exists()
    summary = (tmp_path / 'report.csv.summary.txt').read_text()
    assert 'seed = 3' in summary
    assert 'snr' in capsys.readouterr().out


def test_cli_capture(config_file, tmp_path):
    with pytest.raises(SystemExit) as exc:
        app.main(
            ['capture', '--config', str(config_file), '--snr', '20', '--out',
             str(tmp_path / 'iq')]
        )
    assert exc.value.code == 0
    assert sorted(p.name for p in (tmp_path / 'iq').iterdir()) == [
        'capture.json',
        'capture_ant0.iq',
        'capture_ant1.iq',
    ]


def test_tui_tracks_sweep_progress(small_cfg, tmp_path):
    out = tmp_path / 'tui.csv'
    sweep = app.SweepApp(sim.SimulationManager(small_cfg), out)

    async def drive():
        async with sweep.run_test() as pilot:
            await sweep.workers.wait_for_complete()
            await pilot.pause()
            status = sweep.query_one(SweepStatus)
            assert status.points_done == 2
            assert status.last_point.snr_db == 12.0
            assert 'MCS 0' in str(status.render())
            assert '2/2 points' in str(status.render())
            assert sweep.query_one(PointsTable).row_count == 2

    asyncio.run(drive())
    assert out.exists()
