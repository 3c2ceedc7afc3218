"""Figure rendering for the CLI report paths.

Every plot lands next to the text artifact it illustrates; files only, no
interactive windows.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

PART_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple")


def save_cloud_figure(path, points, labels=None, title: str = "") -> None:
    """3D scatter of an (N, 3) cloud, colored by part label when present."""
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(111, projection="3d")
    if labels is None:
        ax.scatter(points[:, 0], points[:, 1], points[:, 2], s=4, c="tab:blue")
    else:
        for part in sorted(set(int(v) for v in labels)):
            mask = labels == part
            ax.scatter(points[mask, 0], points[mask, 1], points[mask, 2], s=4,
                       color=PART_COLORS[part % len(PART_COLORS)], label=f"part {part}")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_title(title)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_zlabel("z")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_cloud_grid(path, named_clouds, title: str = "") -> None:
    """Grid of 3D scatters: [(name, (N,3) points, labels-or-None), ...]."""
    n = len(named_clouds)
    cols = min(4, max(1, n))
    rows = (n + cols - 1) // cols
    fig = plt.figure(figsize=(3.2 * cols, 3.2 * rows))
    for i, (name, points, labels) in enumerate(named_clouds, start=1):
        ax = fig.add_subplot(rows, cols, i, projection="3d")
        if labels is None:
            ax.scatter(points[:, 0], points[:, 1], points[:, 2], s=2, c="tab:blue")
        else:
            colors = [PART_COLORS[int(v) % len(PART_COLORS)] for v in labels]
            ax.scatter(points[:, 0], points[:, 1], points[:, 2], s=2, c=colors)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_zticks([])
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_loss_curves(path, report: dict) -> None:
    """Train/val loss and the validation metric across epochs."""
    epochs = report["epochs"]
    xs = [e["epoch"] for e in epochs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(xs, [e["train_loss"] for e in epochs], label="train")
    ax1.plot(xs, [e["val_loss"] for e in epochs], label="val")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("cross-entropy")
    ax1.legend()
    ax2.plot(xs, [e["val_metric"] for e in epochs], color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel(f"val {report.get('metric_name', 'metric')}")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_ablation_chart(path, rows: list[dict], metric_name: str) -> None:
    """Bar chart of an ablation table; one bar per row."""
    labels = []
    for row in rows:
        parts = [f"{k}={v}" for k, v in row.items() if k != metric_name]
        labels.append("\n".join(parts))
    values = [row[metric_name] for row in rows]
    fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 4))
    ax.bar(range(len(rows)), values, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel(metric_name)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_std_histogram(path, before_vals, after_vals, title: str = "") -> None:
    """Overlaid histograms of per-point neighborhood spreads."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(before_vals, bins=40, alpha=0.6, label="before", color="tab:blue")
    ax.hist(after_vals, bins=40, alpha=0.6, label="after", color="tab:orange")
    ax.set_xlabel("per-point neighborhood distance std")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
