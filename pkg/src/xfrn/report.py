"""Static figures, each written next to a CSV holding exactly the plotted data."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from xfrn.geometry import SimilarityCurve, write_curves_csv  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, png: Path) -> None:
    png.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(png, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def plot_curves(curves: Sequence[SimilarityCurve], png, title: str = "", ylabel: str = "",
                header_lines: list[str] | None = None) -> tuple[Path, Path]:
    """Line plot of per-layer curves; returns ``(png, csv)``."""
    png = Path(png)
    csv_path = png.with_suffix(".csv")
    write_curves_csv(list(curves), csv_path, header_lines)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for c in curves:
        label = c.metric
        tag = c.metadata.get("condition") or c.metadata.get("pair") or c.metadata.get("language")
        if tag:
            label = f"{label} ({tag})"
        ax.plot(c.layers, c.array(), marker="o", ms=3, label=label)
    ax.set_xlabel("layer")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=7)
    _save(fig, png)
    return png, csv_path


def plot_layer_histogram(counts: dict[str, dict[int, int]], num_layers: int, png, title: str = "",
                         header_lines: list[str] | None = None) -> tuple[Path, Path]:
    """Grouped bars of neuron counts per layer, one series per label."""
    png = Path(png)
    csv_path = png.with_suffix(".csv")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    layers = list(range(1, num_layers + 1))
    labels = sorted(counts)
    with open(csv_path, "w", newline="") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "layer", "count"])
        for lab in labels:
            for layer in layers:
                w.writerow([lab, layer, int(counts[lab].get(layer, 0))])
    fig, ax = plt.subplots(figsize=(6, 3.6))
    width = 0.8 / max(len(labels), 1)
    for k, lab in enumerate(labels):
        xs = [l + (k - (len(labels) - 1) / 2) * width for l in layers]
        ax.bar(xs, [counts[lab].get(l, 0) for l in layers], width=width, label=lab)
    ax.set_xlabel("layer")
    ax.set_ylabel("neurons")
    ax.set_title(title)
    if labels:
        ax.legend(fontsize=7)
    _save(fig, png)
    return png, csv_path


def plot_scatter(rows: Sequence[tuple[str, str, float, float]], png, title: str = "",
                 xlabel: str = "F1 without intervention", ylabel: str = "F1 under mask",
                 header_lines: list[str] | None = None) -> tuple[Path, Path]:
    """Per-question scatter of ``(id, language, x, y)`` rows."""
    png = Path(png)
    csv_path = png.with_suffix(".csv")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["question_id", "language", "x", "y"])
        for qid, lang, x, y in rows:
            w.writerow([qid, lang, repr(float(x)), repr(float(y))])
    fig, ax = plt.subplots(figsize=(4, 4))
    for lang in sorted({r[1] for r in rows}):
        pts = [(x, y) for _, l, x, y in rows if l == lang]
        ax.scatter([p[0] for p in pts], [p[1] for p in pts], s=12, alpha=0.7, label=lang)
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls="--")
    ax.set_xlim(-0.05, 1.05)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if rows:
        ax.legend(fontsize=7)
    _save(fig, png)
    return png, csv_path
