"""Figures for run comparisons: accuracy, accuracy variation, per-round delay.

Rendering is optional; the CSV files are the primary output.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_SIZE = (5.0, 3.2)


def _axes(ylabel):
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.set_xlabel("communication round")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    return fig, ax


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # fixed metadata keeps PNG bytes stable across runs
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def render_comparison(series: dict, out_dir) -> list:
    """``series`` maps a label to a ScenarioResult; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = _axes("global model accuracy")
    for label, res in series.items():
        ax.plot([m.round for m in res.metrics], res.accuracies, marker=".", label=label)
    ax.legend()
    written.append(_save(fig, out / "accuracy.png"))

    fig, ax = _axes("accuracy change vs previous round")
    for label, res in series.items():
        acc = res.accuracies
        ax.plot([m.round for m in res.metrics][1:], np.diff(acc), marker=".", label=label)
    ax.axhline(0.0, color="k", lw=0.5)
    ax.legend()
    written.append(_save(fig, out / "accuracy_variation.png"))

    fig, ax = _axes("round delay (simulated s)")
    for label, res in series.items():
        ax.plot([m.round for m in res.metrics], res.delays, marker=".", label=label)
    ax.legend()
    written.append(_save(fig, out / "delay.png"))
    return written


def render_run(result, out_dir, label="run") -> list:
    return render_comparison({label: result}, out_dir)
