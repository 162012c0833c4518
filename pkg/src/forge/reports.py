"""Figure rendering for stage reports.

Each report stage writes a figure next to its delimited output: the
threshold sweep's dataset-size curve, the toy trainer's loss/margin
trajectory, and the judge's win/tie/lose bars.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .judge import WtlSummary

FIG_DPI = 150


def render_sweep_figure(points, path) -> None:
    """Kept-dataset size against the knowledge threshold."""
    taus = [p.tau_k for p in points]
    sizes = [p.size for p in points]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(taus, sizes, marker="o", color="tab:blue")
    for tau, size in zip(taus, sizes):
        ax.annotate(str(size), (tau, size), textcoords="offset points", xytext=(0, 6), ha="center", fontsize=8)
    ax.set_xlabel("knowledge threshold")
    ax.set_ylabel("kept preference pairs")
    ax.set_title("Dataset size under the knowledge-threshold sweep")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)


def render_margin_figure(history, path) -> None:
    """Training loss and mean margin over gradient steps (twin axes)."""
    steps = [row["step"] for row in history]
    losses = [row["loss"] for row in history]
    margins = [row["mean_margin"] for row in history]
    fig, ax_loss = plt.subplots(figsize=(5.5, 3.5))
    ax_loss.plot(steps, losses, color="tab:red", label="loss")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss", color="tab:red")
    ax_loss.tick_params(axis="y", labelcolor="tab:red")
    ax_margin = ax_loss.twinx()
    ax_margin.plot(steps, margins, color="tab:blue", label="mean margin")
    ax_margin.set_ylabel("mean margin", color="tab:blue")
    ax_margin.tick_params(axis="y", labelcolor="tab:blue")
    ax_loss.set_title("Toy preference-tuning trajectory")
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)


def render_wtl_figure(summary: WtlSummary, path) -> None:
    """Win/tie/lose counts for the pairwise judge run."""
    labels = ("win", "tie", "lose")
    counts = (summary.win, summary.tie, summary.lose)
    colors = ("tab:green", "tab:gray", "tab:red")
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    bars = ax.bar(labels, counts, color=colors)
    for bar, count in zip(bars, counts):
        rate = count / summary.total if summary.total else 0.0
        ax.annotate(
            f"{count} ({rate:.0%})",
            (bar.get_x() + bar.get_width() / 2, bar.get_height()),
            textcoords="offset points",
            xytext=(0, 4),
            ha="center",
            fontsize=9,
        )
    ax.set_ylabel("items")
    ax.set_ylim(0, max(counts) * 1.25 + 1)
    ax.set_title("Pairwise truthfulness verdicts")
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
