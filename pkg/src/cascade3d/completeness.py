"""Point completeness scores and completeness-aware task weights."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box3D, PointCloud, iou_3d, points_in_box, smallest_enclosing_aligned_box


@dataclass(frozen=True)
class CompletenessResult:
    score: float
    enclosing_box: Box3D
    point_count: int


class SparsityLevel(enum.Enum):
    SPARSE = "Sparse"
    MODEST = "Modest"
    COMPLETE = "Complete"


class Strategy(enum.Enum):
    """What the per-proposal score fed to the normalization means."""

    PC_SCORE = "pcscore"  # completeness of the matched ground truth
    IOU_V1 = "iou-v1"  # IoU(proposal, matched ground truth)
    IOU_V2 = "iou-v2"  # IoU(proposal, enclosing box of the GT's points)
    SOFTMAX = "softmax"  # completeness with a softmax instead of linear normalization


@dataclass(frozen=True)
class TaskWeights:
    weights: np.ndarray
    positive_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)


def pc_score(gt_box: Box3D, cloud: PointCloud) -> CompletenessResult:
    """Completeness of the points observed inside ``gt_box``.

    The enclosing box A of the in-box points always lies inside the ground
    truth B, so IoU(A, B) collapses to vol(A) / vol(B).
    """
    if gt_box.is_degenerate:
        raise ValueError("degenerate ground-truth box")
    idx = points_in_box(gt_box, cloud)
    enclosing = smallest_enclosing_aligned_box(gt_box, cloud.subset(idx))
    q = enclosing.volume() / gt_box.volume()
    return CompletenessResult(min(1.0, max(0.0, q)), enclosing, int(len(idx)))


def task_weights(
    scores: Sequence[float],
    positive_mask: Sequence[bool],
    strategy: Strategy = Strategy.PC_SCORE,
) -> TaskWeights:
    """Re-weight positives so their weights sum to the positive count.

    Positives get ``|P| * s_i / sum_P s_j`` (or ``|P| * softmax(s)_i`` for
    ``Strategy.SOFTMAX``); every other proposal keeps weight 1. When all
    positive scores are zero the positives fall back to weight 1.
    """
    s = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(positive_mask, dtype=bool)
    if s.shape != mask.shape:
        raise ValueError("scores and positive_mask differ in length")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite and non-negative")
    w = np.ones_like(s)
    n_pos = int(mask.sum())
    if n_pos:
        sp = s[mask]
        if strategy is Strategy.SOFTMAX:
            e = np.exp(sp - sp.max())
            w[mask] = n_pos * e / e.sum()
        else:
            total = sp.sum()
            if total > 0:
                w[mask] = n_pos * sp / total
    return TaskWeights(w, mask)


def strategy_scores(
    strategy: Strategy,
    proposals: Sequence[Box3D],
    matched_gt: Sequence[int],
    gt_completeness: Sequence[CompletenessResult],
    gt_boxes: Sequence[Box3D],
) -> np.ndarray:
    """Per-proposal scores for ``strategy``; unmatched proposals (index < 0) get 0."""
    out = np.zeros(len(proposals))
    for i, (prop, g) in enumerate(zip(proposals, matched_gt)):
        if g < 0:
            continue
        if strategy in (Strategy.PC_SCORE, Strategy.SOFTMAX):
            out[i] = gt_completeness[g].score
        elif strategy is Strategy.IOU_V1:
            out[i] = iou_3d(prop, gt_boxes[g])
        elif strategy is Strategy.IOU_V2:
            out[i] = iou_3d(prop, gt_completeness[g].enclosing_box)
    return out


def sparsity_level(q: float) -> SparsityLevel:
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"completeness score {q} outside [0, 1]")
    if q < 0.3:
        return SparsityLevel.SPARSE
    if q < 0.6:
        return SparsityLevel.MODEST
    return SparsityLevel.COMPLETE


def _n_bins(bin_width: float) -> int:
    n = round(1.0 / bin_width)
    if n < 1 or abs(n * bin_width - 1.0) > 1e-9:
        raise ValueError(f"bin width {bin_width} does not evenly divide 1")
    return n


def bin_index(q: float, n_bins: int) -> int:
    # boundaries go to the upper bin; q == 1 stays in the top bin
    i = int(math.floor(q * n_bins + 1e-9))
    return min(max(i, 0), n_bins - 1)


def pc_score_histogram(
    results: Iterable[CompletenessResult | float], bin_width: float = 0.05
) -> list[tuple[float, float, float]]:
    """Fraction of objects per completeness bin as ``(lo, hi, fraction)`` rows.

    Bins are half-open ``[lo, hi)`` except the last, which includes 1.
    Empty input gives an empty list.
    """
    qs = [r.score if isinstance(r, CompletenessResult) else float(r) for r in results]
    if not qs:
        return []
    n = _n_bins(bin_width)
    counts = np.zeros(n, dtype=np.int64)
    for q in qs:
        counts[bin_index(q, n)] += 1
    frac = counts / counts.sum()
    return [(i / n, (i + 1) / n, float(frac[i])) for i in range(n)]


def sparsity_counts(results: Iterable[CompletenessResult | float]) -> dict[SparsityLevel, int]:
    counts = {lvl: 0 for lvl in SparsityLevel}
    for r in results:
        q = r.score if isinstance(r, CompletenessResult) else float(r)
        counts[sparsity_level(q)] += 1
    return counts
