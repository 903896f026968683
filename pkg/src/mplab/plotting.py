"""Figures written next to the CSV outputs (training curve, ROC, ablation bars)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .metrics import EvalReport, roc_curve


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=110, metadata={"Software": None})
    return path


def plot_history(history, path) -> Path:
    fig = Figure(figsize=(6.4, 3.6), layout="constrained")
    ax = fig.add_subplot()
    its = [r.iter for r in history.rows]
    ax.plot(its, [r.loss for r in history.rows], color="tab:blue", label="train loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    evals = [(r.iter, r.heldout_auc) for r in history.rows if r.heldout_auc is not None]
    if evals:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evals), "o--", color="tab:orange", label="held-out AUC")
        ax2.set_ylabel("held-out AUC")
        ax2.set_ylim(0, 1)
        fig.legend(loc="upper right")
    return _save(fig, path)


def plot_roc(reports: Sequence[EvalReport], path) -> Path:
    fig = Figure(figsize=(4.8, 4.4), layout="constrained")
    ax = fig.add_subplot()
    for r in reports:
        far, tpr = roc_curve(r.scores, r.labels)
        ax.plot(far, tpr, drawstyle="steps-post", label=f"{r.test_domain} (AUC {r.auc:.3f})")
    ax.plot([0, 1], [0, 1], ":", color="grey")
    ax.set_xlabel("false acceptance rate")
    ax.set_ylabel("true acceptance rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.legend(loc="lower right", fontsize="small")
    return _save(fig, path)


def plot_bench(rows: Sequence[dict], path, metric: str = "auc") -> Path:
    """Mean +- std of ``metric`` per ablation cell over folds and seeds."""
    groups: dict[str, list[float]] = defaultdict(list)
    for row in rows:
        groups[row["cell"]].append(float(row[metric]))
    cells = list(groups)
    means = [np.mean(groups[c]) for c in cells]
    stds = [np.std(groups[c]) for c in cells]
    fig = Figure(figsize=(max(4.0, 0.7 * len(cells) + 1.5), 4.0), layout="constrained")
    ax = fig.add_subplot()
    ax.bar(range(len(cells)), means, yerr=stds, capsize=3, color="tab:blue")
    ax.set_xticks(range(len(cells)), cells, rotation=45, ha="right", fontsize="small")
    ax.set_ylabel(f"held-out {metric.upper()}")
    if metric == "auc":
        ax.set_ylim(0, 1)
    return _save(fig, path)
