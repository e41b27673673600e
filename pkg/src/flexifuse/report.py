"""Figure rendering for the CLI report paths.

Each delimited output (metrics CSV, training loss CSV, fusion trace CSV)
gets a matplotlib figure written next to it.  Rendering is headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import METRIC_ORDER, MetricReport


def save_metric_figure(reports: list[MetricReport], path: str) -> None:
    """Bar chart per metric, one bar group per evaluated image."""
    n = len(METRIC_ORDER)
    cols = 4
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.6 * rows))
    labels = [rep.label for rep in reports]
    for ax, name in zip(axes.flat, METRIC_ORDER):
        ax.bar(range(len(reports)), [rep.values[name] for rep in reports])
        ax.set_title(name, fontsize=10)
        ax.set_xticks(range(len(reports)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    for ax in axes.flat[n:]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_loss_figure(losses: list[float], path: str) -> None:
    """Training loss curve on a log scale."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(losses, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_trace_figure(rows: list[tuple], path: str) -> None:
    """Per-step panels: field norms, adaptive scales, split objective."""
    ts = [r[0] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(11.0, 3.2))
    axes[0].plot(ts, [r[1] for r in rows], label="estimate")
    axes[0].plot(ts, [r[2] for r in rows], label="corrected")
    axes[0].set_title("field norm")
    axes[0].legend(fontsize=8)
    axes[1].plot(ts, [r[3] for r in rows], label="gamma")
    axes[1].plot(ts, [r[4] for r in rows], label="rho")
    axes[1].set_title("scales")
    axes[1].set_yscale("log")
    axes[1].legend(fontsize=8)
    axes[2].plot(ts, [r[5] for r in rows])
    axes[2].set_title("objective")
    axes[2].set_yscale("log")
    for ax in axes:
        ax.invert_xaxis()  # the chain runs from high t to 0
        ax.set_xlabel("t")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
