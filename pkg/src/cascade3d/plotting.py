"""Figure rendering for the report tables. Always writes to files."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_pc_distribution(hist, path, binned_ap: Optional[Sequence] = None) -> Path:
    """Histogram bars of completeness, optionally with per-bin AP on a twin axis."""
    fig, ax = plt.subplots(figsize=(5, 3))
    if hist:
        lo = [h[0] for h in hist]
        width = hist[0][1] - hist[0][0]
        ax.bar(lo, [100 * h[2] for h in hist], width=width, align="edge", color="tab:blue", alpha=0.8)
    ax.set_xlim(0, 1)
    ax.set_xlabel("point completeness score")
    ax.set_ylabel("objects (%)", color="tab:blue")
    if binned_ap:
        ax2 = ax.twinx()
        pts = [((lo + hi) / 2, 100 * ap) for lo, hi, ap in binned_ap if ap is not None]
        if pts:
            ax2.plot(*zip(*pts), "o-", color="tab:red")
        ax2.set_ylabel("AP (%)", color="tab:red")
        ax2.set_ylim(0, 100)
    return _save(fig, path)


def plot_iou_gain(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3.5))
    for t in sorted({r.stages for r in rows}):
        sel = sorted((r.input_iou, r.mean_output_iou) for r in rows if r.stages == t)
        ax.plot(*zip(*sel), "o-", label=f"{t} stage" + ("s" if t > 1 else ""))
    ax.plot([0, 1], [0, 1], ":", color="gray", lw=0.8)
    ax.set_xlabel("input IoU")
    ax.set_ylabel("output IoU")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_loss_distribution(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    mid = [(r.lo + r.hi) / 2 for r in rows]
    width = (rows[0].hi - rows[0].lo) * 0.4 if rows else 0.04
    tot_raw = sum(r.loss_raw for r in rows) or 1.0
    tot_rw = sum(r.loss_reweighted for r in rows) or 1.0
    ax.bar([m - width / 2 for m in mid], [r.loss_raw / tot_raw for r in rows], width, label="w/o re-weighting")
    ax.bar([m + width / 2 for m in mid], [r.loss_reweighted / tot_rw for r in rows], width, label="with re-weighting")
    ax.set_xlabel("point completeness score")
    ax.set_ylabel("share of total loss")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_pr_curves(curves: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3.5))
    for name, pts in curves.items():
        if pts:
            ax.step([p.recall for p in pts], [p.precision for p in pts], where="post", label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_error_breakdown(breakdowns, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    labels = ["Correct", "Mis-Localized", "Background"]
    n = len(breakdowns)
    width = 0.8 / max(n, 1)
    for k, b in enumerate(breakdowns):
        xs = [i + (k - (n - 1) / 2) * width for i in range(3)]
        ax.bar(xs, [100 * r for r in b.ratios()], width, label=f"score > {b.score_threshold:g}")
    ax.set_xticks(range(3))
    ax.set_xticklabels(labels)
    ax.set_ylabel("detections (%)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_occupancy(fractions: Sequence[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.hist([100 * f for f in fractions], bins=30, color="tab:gray")
    ax.set_xlabel("empty voxels per frame (%)")
    ax.set_ylabel("frames")
    return _save(fig, path)
