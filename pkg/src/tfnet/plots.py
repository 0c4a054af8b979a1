"""PNG figures written next to the tabular outputs."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import PRCurve  # noqa: E402


def pr_curve_png(path, curves: Sequence[PRCurve], title: str = "Precision-Recall") -> None:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for cv in curves:
        r = [0.0, *cv.recall]
        p = [1.0, *cv.precision]
        ax.step(r, p, where="post", label=f"class {cv.class_id}  AP {cv.ap:.3f}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    ax.legend(loc="lower left")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def training_curves_png(path, history: Sequence[dict]) -> None:
    """Loss terms on the left, validation metrics on the right."""
    epochs = [r["epoch"] for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("box", "obj", "cls", "reg"):
        vals = [r[key] for r in history]
        if any(vals):
            ax1.plot(epochs, vals, label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend()
    for key in ("precision", "recall", "map50", "mean_iou"):
        vals = [r.get(key) for r in history]
        pts = [(e, v) for e, v in zip(epochs, vals) if v is not None]
        if pts:
            ax2.plot(*zip(*pts), label=key)
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1.02)
    ax2.legend(loc="lower right")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def complexity_png(path, rows: Sequence[dict]) -> None:
    """Bar chart of parameter count and GFLOPs per model."""
    names = [r["name"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(names, [r["parameter_count"] / 1e6 for r in rows], color="tab:blue")
    ax1.set_ylabel("parameters (M)")
    ax2.bar(names, [r["gflops"] for r in rows], color="tab:orange")
    ax2.set_ylabel("GFLOPs")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
