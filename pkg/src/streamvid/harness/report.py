"""Figures for the CLI report path, rendered off-screen to image files."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss(histories, path, title="training loss"):
    """``histories`` maps a label to a list of ``{step, loss, lr}`` records."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        lr_ax = ax.twinx()
        for label, history in histories.items():
            steps = [r["step"] for r in history]
            ax.plot(steps, [r["loss"] for r in history], lw=1.2, label=label)
            lr_ax.plot(steps, [r["lr"] for r in history], lw=0.8, ls=":", color="0.5")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        lr_ax.set_ylabel("learning rate (dotted)")
        lr_ax.grid(False)
        ax.set_title(title)
        if len(histories) > 1:
            ax.legend(loc="upper right")
        return _save(fig, path)


def plot_metric_table(table, path, title="metrics", skip_rows=()):
    """One panel per column, one bar per row."""
    rows = [r for r in table.rows if r not in skip_rows]
    cols = table.columns
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(cols), figsize=(max(3.0, 2.6 * len(cols)), 3.2), squeeze=False)
        for ax, col in zip(axes[0], cols):
            values = [table.rows[r].get(col) for r in rows]
            values = [np.nan if v is None else v for v in values]
            ax.bar(np.arange(len(rows)), values, color=plt.cm.tab10(np.arange(len(rows)) % 10))
            ax.set_xticks(np.arange(len(rows)))
            ax.set_xticklabels(rows, rotation=30, ha="right")
            arrow = "higher is better" if table.directions[col] == "higher" else "lower is better"
            ax.set_title(f"{col} ({arrow})")
        fig.suptitle(title)
        return _save(fig, path)


def plot_normalized(averages, path, title="normalized average"):
    names = list(averages)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 0.45 * len(names) + 1.2))
        ypos = np.arange(len(names))
        ax.barh(ypos, [averages[n] for n in names], color="tab:blue")
        for y, n in zip(ypos, names):
            ax.text(averages[n] + 0.5, y, f"{averages[n]:.1f}", va="center")
        ax.set_yticks(ypos)
        ax.set_yticklabels(names)
        ax.invert_yaxis()
        ax.set_xlim(0, 110)
        ax.set_xlabel("percent of column best")
        ax.set_title(title)
        return _save(fig, path)
