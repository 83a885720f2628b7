"""Report rendering: loss-curve and metric-bar figures as deterministic SVGs
next to a markdown summary table (and the delimited outputs they summarize)."""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MEAN_KEYS  # noqa: E402

LOG_COLUMNS = ("step", "l_ce", "l_dice", "l_cls", "l_pf", "total")

matplotlib.rcParams["svg.hashsalt"] = "pano4d"


def write_train_log(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in LOG_COLUMNS])


def read_train_log(path: str) -> list[dict]:
    with open(path, "r", newline="", encoding="ascii") as fh:
        reader = csv.DictReader(fh)
        return [{k: float(v) for k, v in row.items()} for row in reader]


def _save_svg(fig, path: str) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def loss_curve_figure(runs: dict[str, list[dict]], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, rows in sorted(runs.items()):
        steps = [r["step"] for r in rows]
        ax.plot(steps, [r["total"] for r in rows], label=f"{name} total")
        ax.plot(steps, [r["l_pf"] for r in rows], ls="--", lw=0.8,
                label=f"{name} pseudo-fusion")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    ax.set_title("training loss")
    fig.tight_layout()
    _save_svg(fig, path)


def metric_bars_figure(reports: dict[str, dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(7.2, 4.0))
    names = sorted(reports)
    width = 0.8 / max(len(names), 1)
    xs = range(len(MEAN_KEYS))
    for i, name in enumerate(names):
        means = reports[name]["means"]
        ax.bar([x + i * width for x in xs], [means[k] for k in MEAN_KEYS],
               width=width, label=name)
    ax.set_xticks([x + 0.4 - width / 2 for x in xs])
    ax.set_xticklabels(MEAN_KEYS, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend(fontsize=7)
    ax.set_title("metric families")
    fig.tight_layout()
    _save_svg(fig, path)


def write_report(out_dir: str, train_logs: list[str],
                 metric_reports: list[str]) -> list[str]:
    """Render figures and the markdown summary; returns the files written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    lines = ["# Run report", ""]

    runs = {}
    for path in train_logs:
        rows = read_train_log(path)
        if rows:
            runs[os.path.splitext(os.path.basename(path))[0]] = rows
    if runs:
        fig_path = os.path.join(out_dir, "loss_curves.svg")
        loss_curve_figure(runs, fig_path)
        written.append(fig_path)
        lines += ["## Training", "", "![loss curves](loss_curves.svg)", ""]
        lines.append("| run | steps | first total | last total |")
        lines.append("| --- | ---: | ---: | ---: |")
        for name, rows in sorted(runs.items()):
            lines.append(
                f"| {name} | {len(rows)} | {rows[0]['total']:.6f} "
                f"| {rows[-1]['total']:.6f} |")
        lines.append("")
    elif train_logs:
        lines += ["## Training", "", "no data in the provided training logs", ""]

    reports = {}
    for path in metric_reports:
        with open(path, "r", encoding="utf-8") as fh:
            reports[os.path.splitext(os.path.basename(path))[0]] = json.load(fh)
    if reports:
        fig_path = os.path.join(out_dir, "metric_bars.svg")
        metric_bars_figure(reports, fig_path)
        written.append(fig_path)
        lines += ["## Metrics", "", "![metric families](metric_bars.svg)", ""]
        header = "| metric | " + " | ".join(sorted(reports)) + " |"
        lines.append(header)
        lines.append("| --- |" + " ---: |" * len(reports))
        for key in MEAN_KEYS:
            cells = " | ".join(f"{reports[n]['means'][key]:.4f}"
                               for n in sorted(reports))
            lines.append(f"| {key} | {cells} |")
        lines.append("")

    if not runs and not reports:
        lines += ["no data", ""]
    summary = os.path.join(out_dir, "summary.md")
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    written.append(summary)
    return written
