"""Matplotlib rendering of context-growth and block-count curves."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

if TYPE_CHECKING:
    from .analytics import ComparisonReport

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "font.size": 9,
    "axes.labelsize": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "lines.linewidth": 1.5,
    # fixed salt so SVG element ids are stable across runs
    "svg.hashsalt": "agentfold",
    "svg.fonttype": "none",
}
COLORS = {"fold": "#1f5fa8", "react": "#c0392b", "stepwise": "#2e8b57"}


def _save(fig, path: Path, fmt: str) -> Path:
    meta = {"Date": None} if fmt == "svg" else {}
    fig.savefig(path, format=fmt, metadata=meta)
    plt.close(fig)
    return path


def plot_tokens(report: "ComparisonReport", path: Path, fmt: str = "svg") -> Path:
    with matplotlib.rc_context(STYLE):
        fig, ax = plt.subplots()
        if len(report.series) == 1:
            (name, series), = report.series.items()
            bars = ax.twinx()
            bars.bar([a.turn for a in series], [a.surviving for a in series], color="0.8", width=1.0, zorder=0)
            bars.set_ylabel("surviving trajectories")
            ax.set_zorder(bars.get_zorder() + 1)
            ax.patch.set_visible(False)
        for name, series in report.series.items():
            ax.plot([a.turn for a in series], [a.mean_tokens for a in series],
                    label=name, color=COLORS.get(name))
        ax.set_xlabel("turn")
        ax.set_ylabel(f"mean context tokens ({report.counter})")
        ax.legend(loc="upper left")
        fig.tight_layout()
        return _save(fig, path, fmt)


def plot_blocks(report: "ComparisonReport", path: Path, fmt: str = "svg") -> Path:
    with matplotlib.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, series in report.series.items():
            ax.plot([a.turn for a in series], [a.mean_blocks for a in series],
                    label=name, color=COLORS.get(name))
        ax.set_xlabel("turn")
        ax.set_ylabel("mean blocks in context")
        ax.legend(loc="upper left")
        fig.tight_layout()
        return _save(fig, path, fmt)


def render_report(report: "ComparisonReport", out_dir: Path, fmt: str = "svg") -> list[Path]:
    out_dir = Path(out_dir)
    return [
        plot_tokens(report, out_dir / f"context_tokens.{fmt}", fmt),
        plot_blocks(report, out_dir / f"block_count.{fmt}", fmt),
    ]
