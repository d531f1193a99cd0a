"""Matplotlib renderings written next to the delimited CLI outputs."""

from __future__ import annotations


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_loss_curve(history, path):
    """Loss and learning rate over iterations from a train history."""
    plt = _pyplot()
    iters = [row[0] for row in history]
    lrs = [row[1] for row in history]
    losses = [row[2] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iters, losses, lw=1.0, color="tab:blue", label="loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("cross-entropy loss", color="tab:blue")
    twin = ax.twinx()
    twin.plot(iters, lrs, lw=1.0, color="tab:orange", label="lr")
    twin.set_ylabel("learning rate", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_param_chart(report, path):
    """Horizontal bars of trained parameters per top-level layer."""
    plt = _pyplot()
    names = [row.name for row in report.rows]
    counts = [row.trained for row in report.rows]
    fig, ax = plt.subplots(figsize=(7, 0.35 * len(names) + 1.5))
    ax.barh(range(len(names)), counts, color="tab:green")
    ax.set_yticks(range(len(names)), names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("trained parameters")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
