"""Figure rendering for run artifacts. Everything goes to files (Agg)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def accuracy_curve(per_step: list, path) -> None:
    """Accuracy over incremental steps: seen-class accuracy and base-task accuracy."""
    steps = [row["step"] for row in per_step]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, [row["acc_seen"] for row in per_step], "o-", label="all seen classes")
    ax.plot(steps, [row["base_task_acc"] for row in per_step], "s--", label="base task")
    ax.set_xlabel("incremental step")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_xticks(steps)
    ax.set_ylim(0, 102)
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def landscape_plot(rows: list, path) -> None:
    """Loss vs perturbation radius: one faint line per direction plus the mean."""
    by_dir: dict = {}
    for r in rows:
        by_dir.setdefault(int(r["direction_id"]), []).append((float(r["alpha"]), float(r["loss"])))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    mean_acc: dict = {}
    for d, pts in sorted(by_dir.items()):
        pts.sort()
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, color="tab:blue", alpha=0.25, lw=1)
        for x, y in pts:
            mean_acc.setdefault(x, []).append(y)
    xs = sorted(mean_acc)
    ax.plot(xs, [sum(mean_acc[x]) / len(mean_acc[x]) for x in xs], color="tab:blue", lw=2, label="mean")
    ax.set_xlabel("perturbation alpha")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def compare_plot(comparison: dict, path) -> None:
    """Per-seed metric deltas (B minus A) as grouped bars."""
    per_seed = comparison["per_seed"]
    metrics = [k[len("delta_"):] for k in per_seed[0] if k.startswith("delta_")]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(per_seed), 1)
    for i, row in enumerate(per_seed):
        xs = [j + i * width for j in range(len(metrics))]
        ax.bar(xs, [row[f"delta_{m}"] for m in metrics], width=width, label=f"seed {row['seed']}")
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(metrics))])
    ax.set_xticklabels(metrics)
    ax.set_ylabel("delta (B - A)")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
