"""Matplotlib renderings of the CSV/JSON report data.

Imported lazily by the CLI (``--plot``); the rest of the package does not need
matplotlib. Figures are written without timestamp metadata so reruns produce
identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from emfleet import scoring  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_class_histograms(pops, path, bins: int = 50):
    """Percentage histograms of aggregate scores, one panel per workload class."""
    pops = list(pops)
    cols = min(2, len(pops))
    rows = int(np.ceil(len(pops) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(5 * cols, 3.2 * rows), squeeze=False)
    for ax, pop in zip(axes.flat, pops):
        h = scoring.score_histogram(pop, bins)
        ax.bar(h.edges[:-1], h.percent, width=np.diff(h.edges), align="edge", color="tab:blue", alpha=0.8)
        ax.set_title(f"{pop.workload_class} (checkpoint {pop.checkpoint}, n={pop.n})")
        ax.set_xlabel("model score")
        ax.set_ylabel("% of class")
    for ax in list(axes.flat)[len(pops):]:
        ax.axis("off")
    _save(fig, path)


def plot_consistency(pops, sample_id: str, path, bins: int = 50):
    """Score distribution at each checkpoint with the sample's score marked."""
    report = scoring.checkpoint_consistency(pops, sample_id)
    by_cp = {p.checkpoint: p for p in pops if p.contains(sample_id)}
    fig, axes = plt.subplots(1, len(report.entries), figsize=(4 * len(report.entries), 3.2), squeeze=False)
    for ax, entry in zip(axes[0], report.entries):
        h = scoring.score_histogram(by_cp[entry.checkpoint], bins)
        ax.bar(h.edges[:-1], h.percent, width=np.diff(h.edges), align="edge", color="0.6")
        ax.axvline(entry.score, color="tab:red", lw=2, label=f"{sample_id} (rank {entry.rank})")
        ax.set_title(f"checkpoint {entry.checkpoint}")
        ax.set_xlabel("model score")
        ax.set_ylabel("%")
        ax.legend(fontsize=7)
    _save(fig, path)


def plot_step_profile(report: scoring.ExtrinsicReport, path):
    steps = np.arange(len(report.dims))
    auto = np.array([d.auto for d in report.dims])
    fig, ax = plt.subplots(figsize=(9, 3.5))
    colors = ["tab:red" if j in report.causal_steps else "tab:blue" for j in steps]
    ax.bar(steps, auto, color=colors, label="sample step score")
    for p, row, style in zip(report.percentiles, report.percentile_rows, ("--", ":", "-.", "-")):
        ax.plot(steps, row, style, color="k", label=f"population {p * 100:g}th %-tile")
    ax.set_xlabel("EM step")
    ax.set_ylabel("step score")
    ax.set_title(f"{report.sample_id}: aggregate {report.aggregate:.2f}, rank {report.rank}/{report.n}")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_scree(pcas: dict, path, max_components: int = 10):
    from emfleet.representation import scree

    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, pca in pcas.items():
        rows = scree(pca)[:max_components]
        ax.plot([r[0] for r in rows], [r[2] for r in rows], marker="o", label=label)
    ax.axhline(0.95, color="0.5", ls=":", lw=1)
    ax.set_xlabel("principal component")
    ax.set_ylabel("cumulative explained variance")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_embedding(coords: np.ndarray, labels, groups, path):
    """3-D scatter of the first three embedding coordinates, coloured by ``groups``."""
    fig = plt.figure(figsize=(6, 5))
    ax = fig.add_subplot(projection="3d")
    groups = list(groups)
    for g in sorted(set(groups)):
        idx = [i for i, x in enumerate(groups) if x == g]
        pts = coords[idx]
        z = pts[:, 2] if pts.shape[1] > 2 else np.zeros(len(idx))
        y = pts[:, 1] if pts.shape[1] > 1 else np.zeros(len(idx))
        ax.scatter(pts[:, 0], y, z, label=g, s=18)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.set_zlabel("PC3")
    ax.legend(fontsize=6)
    _save(fig, path)
