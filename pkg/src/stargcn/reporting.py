"""Report emitters: delimited records, aligned text tables and the
matplotlib figures rendered next to them.

Every table goes out twice, as comma-separated records for downstream
tooling and as an aligned text block for human inspection. Figures are
written straight to files (Agg backend, no display needed).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_ndjson(path, records):
    """Line-delimited JSON with stable key order."""
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_ndjson(path):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def format_table(header, rows) -> str:
    """Aligned text table; every cell rendered with str()."""
    cells = [[str(c) for c in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(header)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def write_table(path, header, rows):
    text = format_table(header, rows)
    Path(path).write_text(text, encoding="utf-8")
    return text


def save_training_curves(log_records, path, title=""):
    """Two-panel run summary: losses per iteration, then validation RMSE
    with the learning-rate steps on a twin axis."""
    iterations = [r["iteration"] for r in log_records]
    totals = [r["total_loss"] for r in log_records]
    valid_points = [(r["iteration"], r["valid_rmse"]) for r in log_records
                    if r.get("valid_rmse") is not None]
    lrs = [r["learning_rate"] for r in log_records]

    fig, (ax_loss, ax_valid) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_loss.plot(iterations, totals, lw=0.8, color="tab:blue")
    ax_loss.set_ylabel("training loss")
    ax_loss.set_yscale("log")
    if title:
        ax_loss.set_title(title)
    if valid_points:
        vx, vy = zip(*valid_points)
        ax_valid.plot(vx, vy, lw=1.2, color="tab:red", label="validation RMSE")
        best = int(np.argmin(vy))
        ax_valid.scatter([vx[best]], [vy[best]], color="tab:red", zorder=3, s=18)
    ax_valid.set_xlabel("iteration")
    ax_valid.set_ylabel("validation RMSE")
    ax_lr = ax_valid.twinx()
    ax_lr.plot(iterations, lrs, lw=0.8, color="tab:gray", alpha=0.6, label="lr")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_rmse_bars(labels, values, path, title="", mean_line=True):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(labels))
    ax.bar(x, values, width=0.6, color="tab:blue", alpha=0.8)
    if mean_line and values:
        ax.axhline(float(np.mean(values)), color="tab:red", lw=1.0, ls="--",
                   label=f"mean {np.mean(values):.4f}")
        ax.legend()
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("test RMSE")
    if title:
        ax.set_title(title)
    lo = min(values) if values else 0.0
    hi = max(values) if values else 1.0
    pad = max(0.01, (hi - lo) * 0.4)
    ax.set_ylim(max(0.0, lo - pad), hi + pad)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_grouped_bars(group_labels, series, path, title="", ylabel="test RMSE"):
    """Grouped bar chart; ``series`` maps a series name to one value (or
    None) per group."""
    names = list(series)
    x = np.arange(len(group_labels), dtype=float)
    width = 0.8 / max(1, len(names))
    fig, ax = plt.subplots(figsize=(7, 3.8))
    finite = []
    for k, name in enumerate(names):
        vals = [v if v is not None else np.nan for v in series[name]]
        finite.extend(v for v in vals if v is not None and np.isfinite(v))
        ax.bar(x + (k - (len(names) - 1) / 2) * width, vals, width=width * 0.92,
               label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(group_labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    if finite:
        lo, hi = min(finite), max(finite)
        pad = max(0.01, (hi - lo) * 0.4)
        ax.set_ylim(max(0.0, lo - pad), hi + pad)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
