"""Figures for the report command, rendered headlessly to files.

Each function returns a matplotlib figure; the caller owns saving and
closing it. Styling goes through ``rc_context`` so importing this module
never mutates global matplotlib state beyond forcing the Agg backend.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .expressions import SelectionResult
from .reporting import MethodEntry

STYLE = {
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
}

BEFORE_COLOR = "#9aa5b1"
AFTER_COLOR = "#2f6f4f"
LINE_COLOR = "#2f6f4f"


def alignment_figure(
    results: Sequence[SelectionResult],
    class_names: Mapping[int, str],
) -> "plt.Figure":
    """Paired horizontal bars: few-shot accuracy before and after selection."""
    ordered = sorted(results, key=lambda r: r.category_id)
    names = [class_names.get(r.category_id, str(r.category_id)) for r in ordered]
    before = [r.acc_before for r in ordered]
    after = [r.acc_after for r in ordered]
    with plt.rc_context(STYLE):
        height = max(2.5, 0.4 * len(ordered) + 1.2)
        fig, ax = plt.subplots(figsize=(7.5, height))
        positions = range(len(ordered))
        bar_height = 0.38
        ax.barh(
            [p + bar_height / 2 for p in positions], before,
            height=bar_height, color=BEFORE_COLOR, label="class name",
        )
        ax.barh(
            [p - bar_height / 2 for p in positions], after,
            height=bar_height, color=AFTER_COLOR, label="selected expression",
        )
        ax.set_yticks(list(positions))
        ax.set_yticklabels(names)
        ax.invert_yaxis()
        ax.set_xlim(0.0, 1.0)
        ax.set_xlabel("few-shot accuracy")
        ax.set_title("Expression selection, accuracy per category")
        ax.legend(loc="lower right")
        fig.tight_layout()
    return fig


def comparison_figure(entries: Sequence[MethodEntry]) -> "plt.Figure":
    """Bar chart of one score per method; variants share their base's hue."""
    names = [e.name for e in entries]
    values = [e.map_value for e in entries]
    colors = [AFTER_COLOR if e.variant_of is not None else BEFORE_COLOR for e in entries]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(entries)), 4.0))
        bars = ax.bar(names, values, color=colors)
        ax.bar_label(bars, fmt="%.2f", padding=2)
        ax.set_ylabel("mAP")
        ax.set_title("Method comparison")
        ax.set_ylim(0, max(values) * 1.15 if values else 1.0)
        plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
        fig.tight_layout()
    return fig


def iteration_figure(history: Sequence[float]) -> "plt.Figure":
    """Validation score per self-training iteration."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        xs = list(range(len(history)))
        ax.plot(xs, list(history), marker="o", color=LINE_COLOR)
        ax.set_xticks(xs)
        ax.set_xlabel("iteration")
        ax.set_ylabel("val mAP@0.5")
        ax.set_title("Self-training progress")
        ax.set_ylim(0.0, max(list(history) + [0.1]) * 1.15)
        fig.tight_layout()
    return fig


def save_figure(fig: "plt.Figure", path: str | Path, dpi: int = 150) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path
