"""Report rendering: coverage maps and verdict matrices as figures, plus a
delimited summary next to the JSON reports."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
from matplotlib.patches import Patch, Rectangle

from .validator import Report

STATUS_COLORS = {"pass": "#2e7d32", "fail": "#c62828", "inconclusive": "#9e9e9e"}
OVERALL_COLORS = {"valid": "#2e7d32", "invalid": "#c62828", "inconclusive": "#9e9e9e"}


def save_coverage_figure(report: Report, path: str | Path, title: str = "") -> None:
    """Address-space bars: reachable blocks vs measured regions, with the
    unmeasured-reachable overlap and conditionally-reachable gaps on top."""
    cov = report.coverage
    fig, ax = plt.subplots(figsize=(9, 2.6))
    rows = [
        ("measured", cov.measured if cov else [], "#90caf9"),
        ("reachable", cov.reachable if cov else [], "#a5d6a7"),
        ("unmeasured reachable", cov.unmeasured_reachable if cov else [], "#ef9a9a"),
        ("conditionally reachable", cov.conditionally_reachable if cov else [], "#ffcc80"),
    ]
    spans = [r for _, ranges, _ in rows for r in ranges]
    lo = min((r.start for r in spans), default=0)
    hi = max((r.end for r in spans), default=1)
    for y, (label, ranges, color) in enumerate(rows):
        for r in ranges:
            ax.add_patch(Rectangle((r.start, y + 0.1), r.length, 0.8,
                                   facecolor=color, edgecolor="none"))
    ax.set_xlim(lo, hi)
    ax.set_ylim(0, len(rows))
    ax.set_yticks([y + 0.5 for y in range(len(rows))])
    ax.set_yticklabels([label for label, _, _ in rows])
    ax.invert_yaxis()
    ax.ticklabel_format(axis="x", style="plain")
    ax.set_xlabel("address")
    ax.set_title(title or f"coverage {report.image_sha1[:12]} ({report.overall})")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_matrix_figure(named_reports: list[tuple[str, Report]], path: str | Path) -> None:
    """Fixture-by-property verdict grid."""
    props = ["P1", "P2", "P3", "P4"]
    fig, ax = plt.subplots(figsize=(6, 0.5 * len(named_reports) + 1.6))
    for row, (name, report) in enumerate(named_reports):
        statuses = {v.short_id: v.status for v in report.verdicts}
        for col, prop in enumerate(props):
            color = STATUS_COLORS.get(statuses.get(prop, "inconclusive"), "#9e9e9e")
            ax.add_patch(Rectangle((col, row), 0.94, 0.94, facecolor=color))
        ax.add_patch(Rectangle((len(props), row), 0.94, 0.94,
                               facecolor=OVERALL_COLORS[report.overall]))
    ax.set_xlim(0, len(props) + 1)
    ax.set_ylim(0, len(named_reports))
    ax.set_xticks([c + 0.5 for c in range(len(props) + 1)])
    ax.set_xticklabels(props + ["overall"])
    ax.set_yticks([r + 0.5 for r in range(len(named_reports))])
    ax.set_yticklabels([name for name, _ in named_reports])
    ax.invert_yaxis()
    ax.set_title("property verdicts")
    legend = [Patch(facecolor=c, label=s) for s, c in STATUS_COLORS.items()]
    ax.legend(handles=legend, loc="upper left", bbox_to_anchor=(1.01, 1.0), fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_summary_csv(named_reports: list[tuple[str, Report]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "sha1", "overall", "P1", "P2", "P3", "P4", "total_ms"])
        for name, report in named_reports:
            statuses = {v.short_id: v.status for v in report.verdicts}
            writer.writerow([
                name, report.image_sha1, report.overall,
                statuses["P1"], statuses["P2"], statuses["P3"], statuses["P4"],
                report.timings_ms.get("total", ""),
            ])


def render_all(named_reports: list[tuple[str, Report]], outdir: str | Path) -> list[Path]:
    """Figures and CSV for a batch of validations; returns written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name, report in named_reports:
        stem = Path(name).stem
        if report.coverage is not None:
            target = outdir / f"{stem}_coverage.png"
            save_coverage_figure(report, target, title=f"{stem} ({report.overall})")
            written.append(target)
    matrix = outdir / "matrix.png"
    save_matrix_figure(named_reports, matrix)
    written.append(matrix)
    summary = outdir / "summary.csv"
    write_summary_csv(named_reports, summary)
    written.append(summary)
    return written
