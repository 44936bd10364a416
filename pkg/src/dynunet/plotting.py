"""Figures written next to the CSV reports (headless Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed metadata keeps PNG bytes independent of the matplotlib build date.
_META = {"Software": None}


def plot_loss_curves(logs: dict, path) -> None:
    """``logs`` maps a label to rows ``(iter, lr, total, ce, dice)``."""
    fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(10, 3.8))
    for label, rows in logs.items():
        arr = np.asarray(rows, dtype=float)
        ax_loss.plot(arr[:, 0], arr[:, 2], lw=1.0, label=f"{label} total")
        ax_loss.plot(arr[:, 0], arr[:, 3], lw=0.8, ls="--", label=f"{label} CE")
        ax_loss.plot(arr[:, 0], arr[:, 4], lw=0.8, ls=":", label=f"{label} Dice")
        ax_lr.plot(arr[:, 0], arr[:, 1], lw=1.0, label=label)
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("log")
    ax_loss.legend(fontsize=7)
    ax_lr.set_xlabel("iteration")
    ax_lr.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_bench(rows: list, path, title: str = "mean foreground DSC") -> None:
    """Grouped bars: one group per class plus the mean, one bar per variant.

    ``rows`` holds ``(variant, per_class, mean)`` tuples.
    """
    names = [r[0] for r in rows]
    values = np.array([list(r[1]) + [r[2]] for r in rows])
    groups = [f"class {c}" for c in range(1, values.shape[1])] + ["mean"]
    x = np.arange(len(groups))
    width = 0.8 / len(names)
    fig, ax = plt.subplots(figsize=(max(6.0, 1.3 * len(groups)), 4))
    for i, name in enumerate(names):
        ax.bar(x + (i - (len(names) - 1) / 2) * width, values[i], width, label=name)
    lo = max(0.0, float(values.min()) - 0.05)
    ax.set_ylim(lo, min(1.0, float(values.max()) + 0.02))
    ax.set_xticks(x)
    ax.set_xticklabels(groups)
    ax.set_ylabel("DSC")
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
