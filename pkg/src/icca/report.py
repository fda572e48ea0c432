"""Line charts and a summary table from metrics CSVs."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricRow  # noqa: E402

log = logging.getLogger(__name__)

TITLES = {
    "LENGTH": "Message length",
    "ACCURACY": "Listener accuracy",
    "WNR": "Word novelty rate",
    "WND": "Word novelty distance",
    "SIMILARITY": "Embedding similarity",
}

_RC = {"svg.fonttype": "none", "svg.hashsalt": "icca", "path.simplify": False}


def _plot(metric: str, series: Mapping[str, Sequence[MetricRow]], path: Path) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for label, rows in series.items():
            rows = [r for r in rows if r.mean is not None]
            x = [r.repetition for r in rows]
            ax.plot(x, [r.mean for r in rows], marker="o", label=label)
            banded = [r for r in rows if r.ci_low is not None and r.ci_high is not None]
            if len(banded) == len(rows) and rows:
                ax.fill_between(x, [r.ci_low for r in rows], [r.ci_high for r in rows], alpha=0.2)
            elif rows:
                log.warning("%s/%s: missing CI values, drawing without bands", metric, label)
        ax.set_xticks(range(1, 7))
        ax.set_xticklabels([f"Repetition {r}" for r in range(1, 7)], rotation=30, ha="right", fontsize=7)
        ax.set_xlim(0.7, 6.3)
        ax.set_title(TITLES.get(metric, metric))
        if len(series) > 1:
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def _cell(v: float | None) -> str:
    return "" if v is None else f"{v:.3f}"


def render_report(tables: Mapping[str, Sequence[MetricRow]], out: Path) -> list[Path]:
    """One SVG per metric with every labelled series, plus ``summary.md``."""
    out.mkdir(parents=True, exist_ok=True)
    metrics: list[str] = []
    for rows in tables.values():
        for r in rows:
            if r.metric not in metrics:
                metrics.append(r.metric)
    written = []
    lines = ["| metric | series | " + " | ".join(f"rep {r}" for r in range(1, 7)) + " |",
             "|---|---|" + "---|" * 6]
    for metric in metrics:
        series = {label: [r for r in rows if r.metric == metric] for label, rows in tables.items()}
        series = {k: v for k, v in series.items() if v}
        path = out / f"{metric.lower()}.svg"
        _plot(metric, series, path)
        written.append(path)
        for label, rows in series.items():
            by_rep = {r.repetition: r.mean for r in rows}
            lines.append(f"| {metric} | {label} | " + " | ".join(_cell(by_rep.get(r)) for r in range(1, 7)) + " |")
    summary = out / "summary.md"
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(summary)
    return written
