"""Matplotlib figures written next to the CSV/JSONL outputs."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .visualize import LEVELS  # noqa: E402


def plot_sweep(summary_rows, path, title: str | None = None) -> Path:
    """Accuracy and N-bar per setting, one line per split."""
    path = Path(path)
    settings = list(dict.fromkeys(r["setting"] for r in summary_rows))
    fig, (ax_acc, ax_n) = plt.subplots(1, 2, figsize=(9, 3.4))
    for split in dict.fromkeys(r["split"] for r in summary_rows):
        rs = {r["setting"]: r for r in summary_rows if r["split"] == split}
        xs = [i for i, s in enumerate(settings) if s in rs]
        ax_acc.plot(xs, [rs[settings[i]]["accuracy"] for i in xs], marker="o", label=split)
        ax_n.plot(xs, [rs[settings[i]]["n_bar"] for i in xs], marker="o", label=split)
    labels = [", ".join(map(str, v)) if isinstance(v := json.loads(s), list) else str(v) for s in settings]
    for ax, ylabel in ((ax_acc, "accuracy"), (ax_n, "avg vision tokens")):
        ax.set_xticks(range(len(settings)), labels, rotation=30)
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
    ax_acc.legend(fontsize=8)
    if summary_rows:
        fig.suptitle(title or summary_rows[0]["param"])
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_masks(renders, path, title: str | None = None) -> Path:
    """One panel per pruning site; white cells are pruned."""
    path = Path(path)
    n = max(1, len(renders))
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.9), squeeze=False)
    for ax, r in zip(axes[0], renders):
        img = np.vectorize(LEVELS.get)(r.kinds).astype(float)
        ax.imshow(img, cmap="gray", vmin=0, vmax=255)
        th = "" if r.theta_r is None else f"\nθr={r.theta_r:.2f} θs={r.theta_s:.2f}"
        ax.set_title(f"site {r.site}: {len(r.retained)} kept{th}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(log_records, path) -> Path:
    path = Path(path)
    fig, (ax_l, ax_n) = plt.subplots(1, 2, figsize=(9, 3.2))
    steps = np.arange(len(log_records))
    for key in ("loss", "ntp"):
        ax_l.plot(steps, [r[key] for r in log_records], label=key, lw=0.8)
    ax_n.plot(steps, [r["n_bar"] for r in log_records], lw=0.8)
    ax_l.set_xlabel("step")
    ax_l.legend(fontsize=8)
    ax_n.set_xlabel("step")
    ax_n.set_ylabel("N-bar (soft)")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
