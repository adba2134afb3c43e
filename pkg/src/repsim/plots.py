"""Figure rendering for report outputs.

Figures are presentation only: CKA values are clamped to [0, 1] here and
nowhere else, undefined entries are masked. The numeric CSV/JSON reports
stay the source of truth.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def save_cka_heatmap(matrix, path, title: str | None = None) -> None:
    values = np.clip(matrix.values, 0.0, 1.0)
    masked = np.ma.masked_invalid(values)
    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(masked, vmin=0.0, vmax=1.0, cmap="magma", aspect="auto", origin="lower")
    ax.set_xticks(range(len(matrix.layer_names_b)))
    ax.set_xticklabels(matrix.layer_names_b, rotation=90, fontsize=6)
    ax.set_yticks(range(len(matrix.layer_names_a)))
    ax.set_yticklabels(matrix.layer_names_a, fontsize=6)
    ax.set_xlabel(matrix.model_b or "model b")
    ax.set_ylabel(matrix.model_a or "model a")
    ax.set_title(title or f"CKA (batch {matrix.batch_size}, {matrix.num_samples} samples, {matrix.pooling_mode})")
    fig.colorbar(im, ax=ax, label="CKA")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_profile_plot(profile, path, title: str | None = None) -> None:
    centers = [(b.lo + b.hi) / 2 for b in profile.bins]
    means = [b.mean for b in profile.bins]
    counts = [b.count for b in profile.bins]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(centers, np.clip(means, 0.0, 1.0), marker="o")
    for x, y, c in zip(centers, means, counts):
        if np.isfinite(y):
            ax.annotate(str(c), (x, min(max(y, 0.0), 1.0)), fontsize=6,
                        textcoords="offset points", xytext=(0, 4))
    ax.set_xlabel("normalized layer distance")
    ax.set_ylabel("mean CKA")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_title(title or "CKA vs layer distance")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_knn_sweep_plot(sweep, path, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for c, mode in enumerate(sweep.modes):
        ax.plot(sweep.blocks, sweep.accuracies[:, c], marker="o", label=mode)
    ax.set_xlabel("block")
    ax.set_ylabel(f"{sweep.k}-NN accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    ax.set_title(title or f"{sweep.k}-NN accuracy per block")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_path_plot(report, deltas, path, title: str | None = None) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    entries = report.layer_types + [report.total]
    names = [e.name for e in entries]
    ax1.bar(names, [e.efficiency for e in entries], color="tab:blue")
    ax1.set_ylim(0, 1.05)
    ax1.set_ylabel("path efficiency")
    ax1.tick_params(axis="x", rotation=45)
    steps = range(1, len(report.epochs))
    for name, series in deltas.items():
        ax2.plot(list(steps), series, marker=".", label=name)
    ax2.set_xlabel("epoch step")
    ax2.set_ylabel("L2 step size")
    if len(deltas) <= 8:
        ax2.legend(frameon=False, fontsize=7)
    fig.suptitle(title or f"fine-tuning path ({report.model_id})")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_probe_plot(result, path, title: str | None = None) -> None:
    ok = [r.accuracy for r in result.runs if r.status == "ok"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(sorted(ok, reverse=True), marker="o", label="runs (sorted)")
    ax.axhline(result.best_mean, color="tab:red", linestyle="--",
               label=f"best-{result.best_count} mean {result.best_mean:.4f}")
    ax.fill_between(
        range(len(ok)),
        result.best_mean - result.best_std,
        result.best_mean + result.best_std,
        color="tab:red", alpha=0.15,
    )
    ax.set_xlabel("run rank")
    ax.set_ylabel("top-1 accuracy")
    ax.legend(frameon=False)
    ax.set_title(title or f"probe sweep ({len(ok)} ok, {result.failed} failed)")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
