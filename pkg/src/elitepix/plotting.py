"""Figures written next to the CLI's CSV/JSON outputs.

Uses the non-interactive Agg backend; styling is scoped to each figure via
``rc_context`` so importing this module leaves global rcParams alone.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import SCORE_NAMES  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}
COLORS = ("#08519c", "#a63603", "#006d2c", "#54278f")


def score_chart(report: dict, path, title: str = "") -> None:
    """Bar chart of the four scores plus predicted and reference densities."""
    scores = [float(report["scores"][n]) for n in SCORE_NAMES]
    dens = [float(report["density"]["pred"]), float(report["density"]["truth"])]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, gridspec_kw={"width_ratios": [2, 1]})
        bars = ax1.bar(SCORE_NAMES, scores, color=COLORS)
        ax1.bar_label(bars, fmt="%.2f", fontsize=8)
        ax1.set_ylim(0, 105)
        ax1.set_ylabel("percent")
        bars = ax2.bar(["predicted", "reference"], dens, color=COLORS[:2])
        ax2.bar_label(bars, fmt="%.2f", fontsize=8)
        ax2.set_ylim(0, max(dens + [1.0]) * 1.15)
        ax2.set_ylabel("elite pixel density (%)")
        if title:
            fig.suptitle(title)
        fig.savefig(path)
        plt.close(fig)


def loss_curve(history: list[dict], path, title: str = "") -> None:
    """Train/validation loss and validation F1 per epoch."""
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [r["train_loss"] for r in history], "o-", ms=3, color=COLORS[0], label="train loss")
        ax.plot(epochs, [r["val_loss"] for r in history], "s-", ms=3, color=COLORS[1], label="val loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("soft F1 loss")
        ax.set_ylim(0, 1)
        ax2 = ax.twinx()
        ax2.plot(epochs, [r["val_f1"] for r in history], "--", color=COLORS[2], label="val F1")
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("validation hard F1")
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
