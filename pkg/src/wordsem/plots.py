"""Report figures rendered alongside the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_training_curve(train_log: list[dict], path) -> None:
    """Per-epoch mean loss plus the zero-update fraction on a twin axis."""
    epochs = [rec["epoch"] for rec in train_log]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [rec["mean_loss"] for rec in train_log], color="tab:blue", label="mean loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean ranking loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(
        epochs,
        [rec["zero_update_fraction"] for rec in train_log],
        color="tab:orange",
        label="zero-update fraction",
    )
    ax2.set_ylabel("zero-update fraction", color="tab:orange")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_bars(metrics: dict[str, float], path, title: str = "retrieval metrics") -> None:
    """Horizontal bars, one per reported metric, clipped to [0,1]."""
    names = list(metrics)
    values = [metrics[n] for n in names]
    fig, ax = plt.subplots(figsize=(6, 0.5 * max(4, len(names))))
    ax.barh(range(len(names)), values, color="tab:green")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.set_xlim(0, 1)
    ax.invert_yaxis()
    ax.set_title(title)
    for i, v in enumerate(values):
        ax.text(min(v + 0.01, 0.97), i, f"{v:.3f}", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
