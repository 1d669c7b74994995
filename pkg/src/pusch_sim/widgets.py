from rich.text import Text
from textual.reactive import reactive
from textual.widgets import DataTable, Static

from .sim import REPORT_COLUMNS, format_value


class SweepStatus(Static):
    """What is being swept and how far it got.

    Every finished point goes through :meth:`record`, which redraws the line.
    """

    DEFAULT_CSS = """
    SweepStatus {
        height: 3;
        dock: top;
        padding: 1 2;
        background: $boost;
    }
    """

    points_done = reactive(0)
    last_point = reactive(None)

    def __init__(self, cfg, **kw) -> None:
        super().__init__(**kw)
        self.cfg = cfg
        self.total = len(cfg.snr_points())

    def record(self, row):
        self.last_point = row
        self.points_done += 1

    def render(self):
        cfg = self.cfg
        estimator = 'genie' if cfg.genie else cfg.estimator
        text = Text.assemble(
            (f'MCS {cfg.mcs_index}', 'bold'),
            f'  {cfg.channel}, {estimator}',
            f'  {cfg.snr_start_db}..{cfg.snr_stop_db} dB',
            (f'  {self.points_done}/{self.total} points', 'bold'),
        )
        row = self.last_point
        if row is not None:
            text.append(
                f'  last {row.snr_db} dB: BLER {format_value(row.bler)}'
            )
        return text


class PointsTable(DataTable):
    """Report rows of a running sweep, one line per finished SNR point."""

    DEFAULT_CSS = """
    PointsTable {
        height: 1fr;
        border: solid $accent;
    }
    """

    def on_mount(self) -> None:
        self.border_title = 'SNR points'
        self.cursor_type = 'row'
        self.add_columns(*(Text(c, style='bold') for c in REPORT_COLUMNS))

    def add_point(self, row):
        """Append a :class:`~pusch_sim.models.SimPoint`."""
        self.add_row(
            *(format_value(getattr(row, c)) for c in REPORT_COLUMNS),
            key=f'{row.snr_db}',
        )
