"""Figure rendering for experiment reports.

Every report table has a figure twin written next to the CSV. Files render
through the Agg backend with no embedded timestamps, so repeat runs produce
identical images.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

SAVE_KW = {"dpi": 150, "metadata": {"Date": None}}


def _new_axes(xlabel, ylabel, title):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **SAVE_KW)
    plt.close(fig)
    return path


def training_curve(curve, path, title="Training"):
    """Per-round train loss and validation Hit@10 on twin axes."""
    rounds = [r[0] for r in curve]
    fig, ax = _new_axes("round", "train loss (per sample)", title)
    ax.plot(rounds, [r[1] for r in curve], color="tab:blue", label="train loss")
    ax2 = ax.twinx()
    ax2.set_ylabel("validation Hit@10")
    ax2.plot(rounds, [r[2] for r in curve], color="tab:orange", label="val Hit@10")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
    return _finish(fig, path)


def deviation_trend(deviation, path, title="Embedding deviation"):
    """Mean squared drift of user/item embeddings from their initial values,
    log scale (the user/item magnitudes differ by orders of magnitude)."""
    rounds = [r[0] for r in deviation]
    fig, ax = _new_axes("round", "mean squared deviation", title)
    ax.plot(rounds, [max(r[1], 1e-12) for r in deviation], label="user embeddings")
    ax.plot(rounds, [max(r[2], 1e-12) for r in deviation], label="item embeddings")
    ax.set_yscale("log")
    ax.legend()
    return _finish(fig, path)


def bucket_curve(buckets, path, title="Attack F1 by interaction count"):
    """Mean F1 per interaction bucket (ascending training-positive count)."""
    fig, ax = _new_axes("interaction bucket (fewest to most)", "mean F1", title)
    ax.bar([b[0] for b in buckets], [b[2] for b in buckets], color="tab:purple")
    return _finish(fig, path)


def tradeoff_curve(grid, f1s, hits, xlabel, path, title, log_x=False):
    """Attack F1 and Hit@10 against a defense-strength grid."""
    fig, ax = _new_axes(xlabel, "attacker F1", title)
    ax.plot(grid, f1s, marker="o", color="tab:red", label="attacker F1")
    ax2 = ax.twinx()
    ax2.set_ylabel("Hit@10")
    ax2.plot(grid, hits, marker="s", color="tab:green", label="Hit@10")
    if log_x:
        ax.set_xscale("symlog", linthresh=min((g for g in grid if g > 0), default=1e-3))
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
    return _finish(fig, path)


def gamma_curve(gammas, f1s, path, title="Attacker F1 vs fix fraction"):
    fig, ax = _new_axes("fix fraction per iteration", "mean F1", title)
    ax.plot(gammas, f1s, marker="o", color="tab:red")
    return _finish(fig, path)
