"""Figure rendering for evaluation reports.

Every report figure is written next to its delimited source data (roc.csv,
report.json) so runs remain inspectable without a notebook. Uses the Agg
backend; nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import RocReport  # noqa: E402


def plot_roc(reports: dict[str, RocReport], path: str | Path, max_fpr: float = 1.0) -> None:
    """ROC curves, one per named report, with the FPR budget marked."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    budget = None
    for name, rep in reports.items():
        fprs = [0.0] + [p[1] for p in rep.points]
        tprs = [0.0] + [p[2] for p in rep.points]
        ax.plot(fprs, tprs, label=f"{name} (AUC {rep.auc:.3f})", linewidth=1.5)
        budget = rep.budget
    if budget:
        ax.axvline(budget, color="grey", linestyle="--", linewidth=0.8, label=f"FPR budget {budget:g}")
    ax.set_xlim(0, max_fpr)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_epoch_curves(per_fold_tprs: Sequence[Sequence[float]], path: str | Path) -> None:
    """Validation TPR at the budget, per epoch and fold."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for fold, tprs in enumerate(per_fold_tprs):
        ax.plot(range(len(tprs)), tprs, marker="o", markersize=3, label=f"fold {fold}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation TPR at budget")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_training_loss(losses: Sequence[float], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(losses)), losses, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_ablation(table: dict, path: str | Path) -> None:
    """Grouped bars: test TPR per architecture and embedding corpus."""
    cells = table["cells"]
    archs = sorted({c["architecture"] for c in cells})
    corpora = sorted({c["embedding_corpus"] for c in cells})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(corpora), 1)
    for j, corpus in enumerate(corpora):
        xs, ys = [], []
        for i, arch in enumerate(archs):
            cell = next(
                (c for c in cells if c["architecture"] == arch and c["embedding_corpus"] == corpus),
                None,
            )
            if cell and cell["test_tpr"] is not None:
                xs.append(i + j * width)
                ys.append(cell["test_tpr"])
        ax.bar(xs, ys, width=width, label=corpus)
    ax.set_xticks([i + width * (len(corpora) - 1) / 2 for i in range(len(archs))])
    ax.set_xticklabels(archs)
    ax.set_ylabel("test TPR at budget")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
