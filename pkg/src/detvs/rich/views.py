# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Rich views of DetVS reports.

Views implement the rich console protocol, __rich__(), and are
rendered either to the terminal or to plain aligned text (report files).

Unit tests and examples: tests/test_detvs_views.py
"""


from typing import IO, TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import io
import math

import rich.box
from rich.console import Console, RenderableType
from rich.table import Table
from rich.text import Text

from detvs.mph import HeadBank
from detvs.model import EpochStats
from detvs.rich.theme import DetVSTheme

if TYPE_CHECKING:
    from detvs.controller import ServoResult
    from detvs.harness import ResultTable


class TableLayout:
    """Base for table views: a simple grid with a header row."""

    _table: Table

    def __init__(
        self,
        headers: Sequence[str],
        /,
        title: Optional[str] = None,
        show_header: bool = True,
    ) -> None:
        """Initialize layout.

        Args:
            headers: The table column headers.
            title: Optional table title.
            show_header: Whether to show the table's header row.
        """
        self._table = Table(
            box=rich.box.SIMPLE_HEAD,
            collapse_padding=True,
            pad_edge=False,
            show_edge=False,
            show_header=show_header,
            header_style=DetVSTheme.STYLE_LIST_HEADER,
            title=title,
            title_style=DetVSTheme.STYLE_TITLE,
        )
        for header in headers:
            self._table.add_column(header, no_wrap=True)

    @property
    def renderable(self) -> RenderableType:
        """Rich table."""
        return self._table

    @property
    def row_count(self) -> int:
        """Number of rows."""
        return self._table.row_count

    def add_row(self, *views: Optional[RenderableType]) -> None:
        """Add a row to this table.

        Args:
            views: The row's render-able columns.
        """
        if len(self._table.columns) != len(views):
            raise ValueError(
                f"Expected {len(self._table.columns)} views, got {len(views)}"
            )
        self._table.add_row(*views)

    def __rich__(self) -> RenderableType:
        return self._table


def mk_text(content: str, style: Optional[str] = None) -> Text:
    """Text view factory."""
    return Text(content, style=style or DetVSTheme.STYLE_DEFAULT)


def fmt_mm(meters: float) -> str:
    """Format a distance in millimeters, "-" if undefined."""
    if not math.isfinite(meters):
        return "-"
    return f"{meters * 1e3:.3f}"


def fmt_rate(rate: float) -> str:
    """Format a rate as a percentage, "-" if undefined."""
    if not math.isfinite(rate):
        return "-"
    return f"{100 * rate:.1f}%"


class ResultTableView(TableLayout):
    """Success rates and convergence errors.

    Estimators as rows, tolerance tiers as column groups.
    """

    def __init__(self, table: "ResultTable", rate_bar: float = 0.8) -> None:
        tiers: List[str] = []
        cells: Dict[Tuple[str, str], Tuple[float, float, float, int]] = {}
        estimators: List[str] = []
        for row in table.rows:
            if row.tier not in tiers:
                tiers.append(row.tier)
            if row.estimator not in estimators:
                estimators.append(row.estimator)
            cells[(row.estimator, row.tier)] = (
                row.success_rate,
                row.ce_mean,
                row.ce_std,
                row.trials,
            )

        headers = ["Estimator"]
        for tier in tiers:
            headers.extend((f"SR {tier}", f"CE {tier} (mm)"))
        super().__init__(headers, title="Success rate and convergence error")

        for estimator in estimators:
            views: List[Optional[RenderableType]] = [
                mk_text(estimator, DetVSTheme.STYLE_VARIANT)
            ]
            for tier in tiers:
                cell = cells.get((estimator, tier))
                if cell is None or cell[3] == 0:
                    views.extend(
                        (
                            mk_text("-", DetVSTheme.STYLE_NA),
                            mk_text("-", DetVSTheme.STYLE_NA),
                        )
                    )
                    continue
                rate, ce_mean, ce_std, trials = cell
                style = (
                    DetVSTheme.STYLE_RATE_GOOD
                    if rate >= rate_bar
                    else DetVSTheme.STYLE_RATE_BAD
                )
                views.append(mk_text(f"{fmt_rate(rate)} ({trials})", style))
                views.append(
                    mk_text(
                        f"{fmt_mm(ce_mean)} ± {fmt_mm(ce_std)}",
                        DetVSTheme.STYLE_DISTANCE,
                    )
                )
            self.add_row(*views)


class HistogramView(TableLayout):
    """Sample counts per head interval."""

    BAR_WIDTH = 40

    def __init__(self, bank: HeadBank, counts: Sequence[int]) -> None:
        super().__init__(
            ("Head", "Interval (mm)", "Samples", ""),
            title="Distance norms per head interval",
        )
        top = max(max(counts, default=0), 1)
        for head, count in zip(bank.heads, counts):
            bar = "█" * int(round(self.BAR_WIDTH * count / top))
            self.add_row(
                mk_text(head.name, DetVSTheme.STYLE_HEAD),
                mk_text(f"[{head.lo * 1e3:g}, {head.hi * 1e3:g})"),
                mk_text(str(count)),
                mk_text(bar, DetVSTheme.STYLE_BAR),
            )


class TrainingView(TableLayout):
    """Per-epoch training history."""

    def __init__(self, history: Sequence[EpochStats], variant: str) -> None:
        super().__init__(
            (
                "Epoch",
                "Loss",
                "Distance loss",
                "Confidence loss",
                "Close-range error (mm)",
            ),
            title=f"Training history: {variant}",
        )
        for stats in history:
            self.add_row(
                mk_text(str(stats.epoch)),
                mk_text(f"{stats.loss:.5f}"),
                mk_text(f"{stats.distance_loss:.5f}"),
                mk_text(f"{stats.confidence_loss:.5f}"),
                mk_text(
                    fmt_mm(stats.close_range_error), DetVSTheme.STYLE_DISTANCE
                ),
            )


class ServoSummaryView(TableLayout):
    """Outcome of servo trials."""

    def __init__(
        self, results: Sequence["ServoResult"], estimator: str, tolerance: float
    ) -> None:
        super().__init__(
            ("Trial", "Outcome", "Final error (mm)", "Duration (s)", "Reason"),
            title=f"Servo trials: {estimator}, "
            f"tolerance {tolerance * 1e3:g} mm",
        )
        for i, res in enumerate(results):
            duration = res.trace.records[-1].t if res.trace.records else 0.0
            self.add_row(
                mk_text(str(i)),
                mk_text(
                    "success" if res.success else "failure",
                    DetVSTheme.STYLE_RATE_GOOD
                    if res.success
                    else DetVSTheme.STYLE_RATE_BAD,
                ),
                mk_text(fmt_mm(res.final_error), DetVSTheme.STYLE_DISTANCE),
                mk_text(f"{duration:.2f}"),
                mk_text(res.reason, DetVSTheme.STYLE_NA),
            )


def mk_console(
    file: Optional[IO[str]] = None, stderr: bool = False
) -> Console:
    """Console with the DetVS theme."""
    return Console(
        file=file,
        stderr=stderr,
        theme=DetVSTheme.getinstance().theme,
        highlight=False,
    )


def render_text(view: RenderableType, width: int = 120) -> str:
    """Render a view to plain aligned text (no styles)."""
    buf = io.StringIO()
    console = Console(
        file=buf,
        width=width,
        no_color=True,
        color_system=None,
        theme=DetVSTheme.getinstance().theme,
        highlight=False,
    )
    console.print(view)
    return buf.getvalue()
