"""Result tables: expression selection, method comparison, iteration history.

Every report renders to markdown, CSV, and JSON from the same
:class:`TableReport` value, so the three outputs can never drift apart.
Numbers are formatted identically on every run; nothing here reads clocks.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConfigError
from .expressions import SelectionResult

FORMATS = ("md", "csv", "json")


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        text = f"{value:.4f}".rstrip("0").rstrip(".")
        return text if text else "0"
    return str(value)


@dataclass(frozen=True)
class TableReport:
    """One table plus presentation hints, independent of output format."""

    title: str
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]
    emphasized_rows: tuple[int, ...] = ()
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError(
                    f"row has {len(row)} cells for {len(self.columns)} columns: {row!r}"
                )
        for index in self.emphasized_rows:
            if not (0 <= index < len(self.rows)):
                raise ValueError(f"emphasized row {index} out of range")

    def to_markdown(self) -> str:
        emphasized = set(self.emphasized_rows)
        lines = [f"## {self.title}", ""]
        lines.append("| " + " | ".join(self.columns) + " |")
        lines.append("|" + "|".join(" --- " for _ in self.columns) + "|")
        for i, row in enumerate(self.rows):
            cells = [format_cell(v) for v in row]
            if i in emphasized:
                cells = [f"**{c}**" if c else c for c in cells]
            lines.append("| " + " | ".join(cells) + " |")
        for note in self.notes:
            lines.append("")
            lines.append(note)
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([format_cell(v) for v in row])
        return buffer.getvalue()

    def to_json_obj(self) -> dict:
        return {
            "title": self.title,
            "columns": list(self.columns),
            "rows": [list(row) for row in self.rows],
            "emphasized_rows": list(self.emphasized_rows),
            "notes": list(self.notes),
        }

    def render(self, fmt: str) -> str:
        if fmt == "md":
            return self.to_markdown()
        if fmt == "csv":
            return self.to_csv()
        if fmt == "json":
            return json.dumps(self.to_json_obj(), indent=2, sort_keys=True) + "\n"
        raise ConfigError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def render_alignment_report(
    results: Sequence[SelectionResult],
    class_names: Mapping[int, str],
    title: str = "Expression selection",
) -> TableReport:
    """Per-category accuracy before and after expression selection.

    A row is emphasized exactly when selection strictly improved the
    few-shot accuracy over the raw class name.
    """
    rows = []
    emphasized = []
    for i, result in enumerate(sorted(results, key=lambda r: r.category_id)):
        improved = result.acc_after > result.acc_before
        rows.append(
            (
                result.category_id,
                class_names.get(result.category_id, str(result.category_id)),
                result.best.text,
                result.acc_before,
                result.acc_after,
                improved,
            )
        )
        if improved:
            emphasized.append(i)
    improved_count = len(emphasized)
    mean_before = sum(r.acc_before for r in results) / len(results) if results else 0.0
    mean_after = sum(r.acc_after for r in results) / len(results) if results else 0.0
    notes = (
        f"Selection improved {improved_count} of {len(rows)} categories.",
        f"Mean accuracy {format_cell(mean_before)} before, {format_cell(mean_after)} after.",
    )
    return TableReport(
        title=title,
        columns=("category_id", "class", "selected expression", "acc before", "acc after", "improved"),
        rows=tuple(rows),
        emphasized_rows=tuple(emphasized),
        notes=notes,
    )


@dataclass(frozen=True)
class MethodEntry:
    """One method's score in a comparison table."""

    name: str
    map_value: float
    variant_of: str | None = None

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValueError("method entry needs a name")


def render_comparison_report(
    entries: Sequence[MethodEntry],
    title: str = "Method comparison",
    metric_label: str = "mAP",
) -> TableReport:
    """Methods side by side, with deltas against the variants they extend."""
    by_name = {e.name: e for e in entries}
    rows = []
    best_index = None
    best_value = None
    for i, entry in enumerate(entries):
        delta = None
        if entry.variant_of is not None:
            base = by_name.get(entry.variant_of)
            if base is None:
                raise ConfigError(
                    f"method {entry.name!r} extends unknown method {entry.variant_of!r}"
                )
            delta = entry.map_value - base.map_value
        rows.append((entry.name, entry.map_value, delta))
        if best_value is None or entry.map_value > best_value:
            best_value = entry.map_value
            best_index = i
    emphasized = (best_index,) if best_index is not None else ()
    return TableReport(
        title=title,
        columns=("method", metric_label, "delta vs base"),
        rows=tuple(rows),
        emphasized_rows=emphasized,
    )


def render_iteration_report(
    history: Sequence[Mapping],
    title: str = "Self-training iterations",
) -> TableReport:
    """One row per iteration from the loop's metrics records."""
    rows = []
    best_index = None
    best_value = None
    for i, record in enumerate(history):
        value = record.get("val_map_50")
        rows.append(
            (
                record.get("iteration", i),
                record.get("model", ""),
                value,
                record.get("num_pseudo_labels"),
                record.get("num_train_boxes"),
            )
        )
        if value is not None and (best_value is None or value > best_value):
            best_value = value
            best_index = i
    return TableReport(
        title=title,
        columns=("iteration", "model", "val mAP@0.5", "pseudo labels", "train boxes"),
        rows=tuple(rows),
        emphasized_rows=(best_index,) if best_index is not None else (),
    )


def save_report(report: TableReport, path: str | Path, fmt: str | None = None) -> Path:
    """Write one rendering of the report; format comes from ``fmt`` or the suffix."""
    path = Path(path)
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    if fmt == "markdown":
        fmt = "md"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.render(fmt), encoding="utf-8")
    return path
