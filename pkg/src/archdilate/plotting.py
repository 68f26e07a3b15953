"""Report figures rendered next to the CSV outputs (Agg backend, files only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_curves(rows: list[dict], columns, path, title: str = "", x: str = "epoch") -> None:
    """One line per column against epochs."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [float(r[x]) for r in rows]
    for c in columns:
        ax.plot(xs, [float(r[c]) for r in rows], marker="o", label=c)
    ax.set_xlabel(x)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if columns:
        ax.legend(fontsize=8)
    _save(fig, path)


def plot_search(rows: list[dict], path) -> None:
    """Losses, constraint/multipliers and expected FLOPs during search."""
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    ep = [int(r["epoch"]) for r in rows]
    for c in ("std_train_loss", "adv_train_loss", "std_valid_loss", "adv_valid_loss"):
        axes[0].plot(ep, [float(r[c]) for r in rows], marker="o", label=c)
    axes[0].set_title("losses")
    for c in ("c1", "c2", "lambda1", "lambda2"):
        axes[1].plot(ep, [float(r[c]) for r in rows], marker="o", label=c)
    axes[1].axhline(0.0, color="k", lw=0.6)
    axes[1].set_title("constraints and multipliers")
    axes[2].plot(ep, [float(r["expected_flops"]) for r in rows], marker="o", color="tab:purple")
    axes[2].set_title("expected dilation FLOPs")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=7)
    axes[1].legend(fontsize=7)
    _save(fig, path)


def plot_accuracy(rows: list[dict], path, title: str = "accuracy under attack") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [str(r["attack"]) for r in rows]
    acc = [float(r["accuracy"]) for r in rows]
    bars = ax.bar(names, acc, color="tab:blue")
    for b, a in zip(bars, acc):
        ax.text(b.get_x() + b.get_width() / 2, a + 0.01, f"{a:.3f}", ha="center", fontsize=8)
    ax.set_ylim(0, 1.08)
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    _save(fig, path)


def plot_flops(rows: list[tuple[str, float]], path) -> None:
    keep = [(k, v) for k, v in rows if k.startswith(("node_", "cell_"))]
    fig, ax = plt.subplots(figsize=(6, 4))
    if keep:
        ax.bar([k for k, _ in keep], [v for _, v in keep], color="tab:orange")
    ax.set_ylabel("multiply-adds")
    ax.set_title("expected FLOPs per node and per block")
    ax.tick_params(axis="x", rotation=45)
    _save(fig, path)


def plot_bounds(summaries, path) -> None:
    """Worst observed lhs - rhs per inequality (non-positive means it always held)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [s.name for s in summaries]
    worst = np.array([s.worst_violation for s in summaries])
    colors = ["tab:green" if s.passed else "tab:red" for s in summaries]
    ax.bar(names, worst, color=colors)
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_ylabel("max(lhs - rhs)")
    ax.set_title("bound checks: worst violation")
    ax.tick_params(axis="x", rotation=30)
    _save(fig, path)
