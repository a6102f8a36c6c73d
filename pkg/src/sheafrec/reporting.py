"""Figure rendering for training histories and sweep reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_history_figure(history: list[dict], path) -> Path:
    """Training loss and validation NDCG per epoch, twin axes."""
    path = Path(path)
    epochs = [h["epoch"] for h in history]
    losses = [h["loss"] for h in history]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(epochs, losses, color="tab:blue", label="training loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss", color="tab:blue")
    val_points = [(h["epoch"], h["val_ndcg@10"]) for h in history if h.get("val_ndcg@10") is not None]
    if val_points:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val_points), color="tab:orange", label="validation NDCG@10")
        ax2.set_ylabel("validation NDCG@10", color="tab:orange")
    ax.set_title("training history")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_sweep_figures(rows: list[dict], ks, axis: str, out_dir) -> list[Path]:
    """One figure per quality metric: metric@K against the sweep axis, with
    wall time on a secondary axis.  Failed runs are left out."""
    out_dir = Path(out_dir)
    ok = [r for r in rows if r.get("status") == "ok"]
    if not ok:
        return []
    labels = [str(r["value"]) for r in ok]
    xs = range(len(ok))
    written: list[Path] = []
    for metric in ("ndcg", "f1"):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for k in ks:
            ax.plot(xs, [r[f"{metric}@{k}"] for r in ok], marker="o", label=f"{metric}@{k}")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(labels)
        ax.set_xlabel(axis)
        ax.set_ylabel(metric)
        ax.legend(loc="upper left")
        ax2 = ax.twinx()
        ax2.plot(xs, [r["wall_time_s"] for r in ok], color="gray", linestyle="--", marker="s",
                 label="wall time")
        ax2.set_ylabel("wall time [s]", color="gray")
        ax.set_title(f"{metric} across {axis}")
        fig.tight_layout()
        path = out_dir / f"sweep_{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
