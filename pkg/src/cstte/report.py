"""Run reports: delimited metric files, human-readable summaries, figures.

Metric files are line-oriented `key=value` text with repr-formatted floats,
so a rerun with the same seed produces a byte-identical file; wall time and
other facts that legitimately vary between runs go to the .txt summary and
the log instead.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")  # render to files, no display server

import matplotlib.pyplot as plt
import numpy as np

from cstte.downstream import EvalMetrics, RankingResult
from cstte.errors import DataError
from cstte.pretrain import EpochStats
from cstte.trajdata import Trajectory

_BAR_COLORS = ("#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#797979")


# ---------------------------------------------------------------------------
# delimited metric files
# ---------------------------------------------------------------------------


def _format_kv(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))  # float() strips numpy wrappers from repr
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_metrics_kv(path, metrics: dict) -> Path:
    """One `key=value` per line, keys in insertion order, floats via repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in metrics.items():
        if "=" in key or "\n" in key:
            raise DataError(f"metric key {key!r} cannot be serialized")
        lines.append(f"{key}={_format_kv(value)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_metrics_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"malformed metric line {line!r} in {path}")
        out[key] = value
    return out


def metrics_to_kv(metrics: EvalMetrics, extra: Optional[dict] = None) -> dict:
    out = dict(extra or {})
    for key, value in metrics.as_key_values():
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# human-readable summaries
# ---------------------------------------------------------------------------


def format_eval_report(
    task: str,
    method: str,
    metrics: EvalMetrics,
    n_queries: int,
    wall_seconds: float,
    notes: Sequence[str] = (),
) -> str:
    lines = [
        f"task: {task}",
        f"method: {method}",
        f"queries: {n_queries}",
    ]
    for key, value in metrics.as_key_values():
        lines.append(f"{key}: {value:.4f}")
    lines.extend(notes)
    lines.append(f"wall_seconds: {wall_seconds:.2f}")
    return "\n".join(lines) + "\n"


def format_training_report(
    history: Sequence[EpochStats], best_epoch: int, best_val: float, wall_seconds: float
) -> str:
    lines = [
        f"epochs_run: {len(history)}",
        f"best_epoch: {best_epoch}",
        f"best_val_loss: {best_val:.6f}",
        f"final_train_loss: {history[-1].train_loss:.6f}",
        f"wall_seconds: {wall_seconds:.2f}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def loss_curve_figure(history: Sequence[EpochStats], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h.train_loss for h in history], marker="o", label="train")
    ax.plot(epochs, [h.val_loss for h in history], marker="s", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("contrastive loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def metric_bars_figure(per_method: dict[str, EvalMetrics], path, title: str = "") -> Path:
    """Grouped Acc@N bars, one group per cutoff, one bar color per method."""
    if not per_method:
        raise DataError("no methods to plot")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    methods = list(per_method)
    levels = sorted(next(iter(per_method.values())).acc_at)
    x = np.arange(len(levels), dtype=np.float64)
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, method in enumerate(methods):
        heights = [per_method[method].acc_at[n] for n in levels]
        offset = (i - (len(methods) - 1) / 2.0) * width
        ax.bar(x + offset, heights, width, label=method, color=_BAR_COLORS[i % len(_BAR_COLORS)])
    ax.set_xticks(x)
    ax.set_xticklabels([f"Acc@{n}" for n in levels])
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("accuracy")
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def rank_histogram_figure(result: RankingResult, path, max_rank: int = 50) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ranks = np.array([result.true_ranks[q] for q in result.query_ids])
    clipped = np.minimum(ranks, max_rank)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(clipped, bins=np.arange(0.5, max_rank + 1.5), color=_BAR_COLORS[0])
    ax.set_xlabel(f"rank of the true candidate (clipped at {max_rank})")
    ax.set_ylabel("queries")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def dataset_overview_figure(
    trajs: Sequence[Trajectory], path, max_shown: int = 120, title: str = ""
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 6))
    for traj in trajs[:max_shown]:
        ax.plot(traj.lon, traj.lat, linewidth=0.6, alpha=0.5)
        ax.plot(traj.lon[-1], traj.lat[-1], marker=".", markersize=3, color="black")
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.set_aspect("equal", adjustable="datalim")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
