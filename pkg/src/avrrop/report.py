"""Per-application payload table and figures.

The table has one row per firmware image: application name, application code
size in KB and the length of the shortest injection payload (or ``none`` when
no chain exists).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .campaign import PropagationReport  # noqa: E402
from .chains import ChainGoal, SynthesisConstraints, synthesize_chain  # noqa: E402
from .errors import ConstraintUnsatisfiable, NoChainFound  # noqa: E402
from .firmware import FirmwareImage  # noqa: E402
from .gadgets import ScanConfig, scan_gadgets  # noqa: E402

TABLE_COLUMNS = ("application", "code_size_kb", "payload_length")


@dataclass(frozen=True)
class AppRow:
    application: str
    code_size_kb: float
    # full packet payload (padding prefix included); None when no chain exists
    payload_length: int | None
    gadgets: int = 0

    @property
    def payload_text(self) -> str:
        return "none" if self.payload_length is None else str(self.payload_length)

    def to_json(self) -> dict[str, Any]:
        return {
            "application": self.application,
            "code_size_kb": round(self.code_size_kb, 1),
            "payload_length": self.payload_length if self.payload_length is not None else "none",
        }


def application_row(
    name: str,
    image: FirmwareImage,
    constraints: SynthesisConstraints | None = None,
    config: ScanConfig | None = None,
) -> AppRow:
    constraints = constraints or SynthesisConstraints()
    catalog = scan_gadgets(image, config)
    try:
        best = synthesize_chain(catalog, ChainGoal.write_byte(), constraints)[0]
        length: int | None = constraints.padding_prefix + best.payload_length
    except (NoChainFound, ConstraintUnsatisfiable):
        length = None
    return AppRow(name, image.app_code_bytes() / 1024, length, len(catalog))


def table_text(rows: Sequence[AppRow]) -> str:
    head = f"{'Application':<24} {'Code size (KB)':>14} {'Payload length':>15}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.application:<24} {r.code_size_kb:>14.1f} {r.payload_text:>15}")
    return "\n".join(lines)


def table_csv(rows: Iterable[AppRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in rows:
        w.writerow([r.application, f"{r.code_size_kb:.1f}", r.payload_text])
    return buf.getvalue()


def table_json(rows: Iterable[AppRow]) -> str:
    return json.dumps([r.to_json() for r in rows], indent=2)


def plot_table(rows: Sequence[AppRow], path: str | Path) -> Path:
    """Bar chart of payload length per application; ``none`` rows are marked."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(rows)), 3.2))
    xs = range(len(rows))
    heights = [r.payload_length or 0 for r in rows]
    bars = ax.bar(xs, heights, color="0.35")
    for bar, r in zip(bars, rows):
        ax.annotate(r.payload_text, (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.axhline(SynthesisConstraints().max_packet_payload, ls="--", lw=0.8, color="k")
    ax.set_xticks(list(xs), [r.application for r in rows], rotation=30, ha="right")
    ax.set_ylabel("payload (bytes)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_propagation(report: PropagationReport, path: str | Path, title: str | None = None) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    rounds = range(len(report.infected_per_round))
    ax.step(rounds, report.infected_per_round, where="post", color="k")
    ax.plot(rounds, report.infected_per_round, "o", ms=3, color="k")
    ax.set_xlabel("round")
    ax.set_ylabel("infected nodes")
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
