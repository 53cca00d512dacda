"""Detection matching, interpolated AP, stratified evaluation and error analysis."""

from __future__ import annotations

import enum
import bisect
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset_io import DetectionRecord, Difficulty
from .geometry import Box3D, iou_3d, iou_bev


@dataclass(frozen=True)
class GroundTruth:
    box: Box3D
    class_name: str
    difficulty: Optional[Difficulty] = None
    q: float = 1.0
    num_points: int = 0

    @property
    def distance(self) -> float:
        return math.hypot(self.box.cx, self.box.cy)


@dataclass
class FrameEvalRecord:
    frame_id: str
    detections: list[DetectionRecord] = field(default_factory=list)
    ground_truths: list[GroundTruth] = field(default_factory=list)


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    tp: Optional[int] = None
    num_det: Optional[int] = None


class DetStatus(enum.IntEnum):
    FP = 0
    TP = 1
    IGNORED = 2


class GtStatus(enum.IntEnum):
    MISSED = 0
    MATCHED = 1
    IGNORED = 2


@dataclass
class FrameMatch:
    """Outcome of matching one frame; detection arrays are in score order."""

    det_index: np.ndarray
    det_scores: np.ndarray
    det_status: np.ndarray
    gt_status: np.ndarray

    @property
    def num_tp(self) -> int:
        return int(np.sum(self.det_status == DetStatus.TP))

    @property
    def num_gt(self) -> int:
        return int(np.sum(self.gt_status != GtStatus.IGNORED))


GtFilter = Callable[[GroundTruth], bool]
DetFilter = Callable[[DetectionRecord], bool]

_IOU = {"3d": iou_3d, "bev": iou_bev}


def _iou_fn(kind: str):
    try:
        return _IOU[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown IoU kind {kind!r}; expected '3d' or 'bev'") from None


def iou_matrix(dets: Sequence[DetectionRecord], gts: Sequence[GroundTruth], kind: str = "3d") -> np.ndarray:
    fn = _iou_fn(kind)
    m = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            m[i, j] = fn(d.box, g.box)
    return m


def _score_order(dets: Sequence[DetectionRecord]) -> np.ndarray:
    return np.array(sorted(range(len(dets)), key=lambda i: -dets[i].score), dtype=np.int64)


def _match(
    dets: Sequence[DetectionRecord],
    gts: Sequence[GroundTruth],
    ious: np.ndarray,
    class_name: Optional[str],
    thresh: float,
    gt_filter: Optional[GtFilter],
    det_filter: Optional[DetFilter],
) -> FrameMatch:
    det_keep = [i for i, d in enumerate(dets) if class_name is None or d.class_name == class_name]
    gt_same = np.array([class_name is None or g.class_name == class_name for g in gts], dtype=bool)
    included = np.array([bool(s) and (gt_filter is None or gt_filter(g)) for s, g in zip(gt_same, gts)], dtype=bool)

    order = sorted(det_keep, key=lambda i: -dets[i].score)
    taken = ~gt_same
    status = np.empty(len(order), dtype=np.int64)
    for k, i in enumerate(order):
        best_j, best = -1, -1.0
        for j in range(len(gts)):
            if not taken[j] and ious[i, j] > best:
                best_j, best = j, ious[i, j]
        if best_j >= 0 and best >= thresh:
            taken[best_j] = True
            status[k] = DetStatus.TP if included[best_j] else DetStatus.IGNORED
        elif det_filter is not None and not det_filter(dets[i]):
            status[k] = DetStatus.IGNORED
        else:
            status[k] = DetStatus.FP

    gt_status = np.full(len(gts), GtStatus.IGNORED, dtype=np.int64)
    gt_status[included] = np.where(taken[included], GtStatus.MATCHED, GtStatus.MISSED)
    idx = np.array(order, dtype=np.int64)
    scores = np.array([dets[i].score for i in order], dtype=np.float64)
    return FrameMatch(idx, scores, status, gt_status)


def match_detections(
    frame: FrameEvalRecord,
    iou_kind: str = "3d",
    iou_thresh: float = 0.7,
    gt_filter: Optional[GtFilter] = None,
    class_name: Optional[str] = None,
    det_filter: Optional[DetFilter] = None,
) -> FrameMatch:
    """Greedy score-ordered matching of one frame.

    Each detection, highest score first, takes the unmatched same-class
    ground truth of highest IoU (lowest index on ties) when that IoU reaches
    ``iou_thresh``. Ground truths rejected by ``gt_filter`` still absorb
    such matches, but the detection is then ignored instead of counted.
    Unmatched detections rejected by ``det_filter`` are ignored too.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"IoU threshold {iou_thresh} outside (0, 1)")
    ious = iou_matrix(frame.detections, frame.ground_truths, iou_kind)
    return _match(frame.detections, frame.ground_truths, ious, class_name, iou_thresh, gt_filter, det_filter)


def pr_curve(scores: Sequence[float], is_tp: Sequence[bool], num_gt: int) -> list[PRPoint]:
    """Precision/recall at every distinct score threshold, highest first.

    Detections sharing a score enter together, so the curve does not
    depend on how ties happen to be ordered.
    """
    if num_gt <= 0 or len(scores) == 0:
        return []
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(is_tp, dtype=bool)
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    tp = np.cumsum(t)
    last = np.append(s[1:] != s[:-1], True)
    n = np.arange(1, len(s) + 1)
    return [
        PRPoint(float(tp[k] / num_gt), float(tp[k] / n[k]), int(tp[k]), int(n[k]))
        for k in np.flatnonzero(last)
    ]


def recall_positions(positions: int) -> list[Fraction]:
    if positions == 11:
        return [Fraction(i, 10) for i in range(11)]
    if positions == 40:
        return [Fraction(i, 40) for i in range(1, 41)]
    raise ValueError(f"unsupported recall positions {positions}; use 11 or 40")


def ap_interpolated(pr: Sequence[PRPoint], positions: int, num_gt: int) -> Optional[float]:
    """Interpolated AP; ``None`` when there are no ground truths.

    AP11 averages over recall {0, 0.1, ..., 1}; AP40 over {1/40, ..., 1}.
    At each recall level the precision is the best one reached at that
    recall or higher, 0 if that recall is never reached. Points that carry
    their counts are summed as exact rationals and rounded once.
    """
    if num_gt <= 0:
        return None
    levels = recall_positions(positions)
    if all(p.tp is not None for p in pr):
        rec = [Fraction(p.tp, num_gt) for p in pr]
        prec = [Fraction(p.tp, p.num_det) for p in pr]
    else:
        rec = [Fraction(p.recall) for p in pr]
        prec = [Fraction(p.precision) for p in pr]
    # recall never decreases along the curve, so a suffix max answers each level
    best = list(prec)
    for k in range(len(best) - 2, -1, -1):
        best[k] = max(best[k], best[k + 1])
    total = Fraction(0)
    for r in levels:
        k = bisect.bisect_left(rec, r)
        total += best[k] if k < len(best) else 0
    return float(total / len(levels))


@dataclass(frozen=True)
class Stratum:
    name: str
    gt_filter: Optional[GtFilter] = None
    det_filter: Optional[DetFilter] = None


def _kitti_level(level: Difficulty) -> GtFilter:
    # devkit levels are cumulative: Moderate also scores Easy objects
    return lambda g: g.difficulty is not None and g.difficulty <= level


WAYMO_DISTANCE_BINS = ((0.0, 30.0), (30.0, 50.0), (50.0, math.inf))


def _in_range(lo: float, hi: float) -> Callable[[float], bool]:
    return lambda d: lo <= d < hi


def kitti_strata() -> list[Stratum]:
    return [Stratum(lvl.name.capitalize(), _kitti_level(lvl)) for lvl in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD)]


def waymo_strata() -> list[Stratum]:
    out = []
    for level, min_pts in (("LEVEL_1", 5), ("LEVEL_2", 1)):
        out.append(Stratum(level, lambda g, m=min_pts: g.num_points >= m))
        for lo, hi in WAYMO_DISTANCE_BINS:
            rng = _in_range(lo, hi)
            label = f"{level}/{lo:g}-{hi:g}m" if math.isfinite(hi) else f"{level}/{lo:g}m-inf"
            out.append(
                Stratum(
                    label,
                    lambda g, m=min_pts, r=rng: g.num_points >= m and r(g.distance),
                    lambda d, r=rng: r(math.hypot(d.box.cx, d.box.cy)),
                )
            )
    return out


def strata_for(stratifier: str) -> list[Stratum]:
    if stratifier == "kitti":
        return kitti_strata()
    if stratifier == "waymo":
        return waymo_strata()
    if stratifier in ("none", "all"):
        return [Stratum("all")]
    raise ValueError(f"unknown stratifier {stratifier!r}")


@dataclass(frozen=True)
class EvalConfig:
    class_name: Optional[str] = "Car"
    iou_kind: str = "3d"
    iou_thresh: float = 0.7
    positions: tuple[int, ...] = (11, 40)
    stratifier: str = "kitti"


@dataclass(frozen=True)
class APRow:
    stratum: str
    class_name: str
    metric: str
    ap: Optional[float]
    num_gt: int
    pr: tuple[PRPoint, ...] = ()


def _pooled_ap(matches: Sequence[FrameMatch], positions: Sequence[int]):
    scores, tps = [], []
    n_gt = 0
    for m in matches:
        keep = m.det_status != DetStatus.IGNORED
        scores.append(m.det_scores[keep])
        tps.append(m.det_status[keep] == DetStatus.TP)
        n_gt += m.num_gt
    s = np.concatenate(scores) if scores else np.zeros(0)
    t = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
    pr = pr_curve(s, t, n_gt)
    return {p: ap_interpolated(pr, p, n_gt) for p in positions}, n_gt, pr


def _frame_ious(frames: Sequence[FrameEvalRecord], kind: str) -> list[np.ndarray]:
    return [iou_matrix(f.detections, f.ground_truths, kind) for f in frames]


def evaluate_strata(
    frames: Sequence[FrameEvalRecord],
    strata: Sequence[Stratum],
    config: EvalConfig,
    ious: Optional[list[np.ndarray]] = None,
) -> list[APRow]:
    """AP per stratum, pooling all frames before interpolation."""
    if ious is None:
        ious = _frame_ious(frames, config.iou_kind)
    metric_base = "AP_BEV" if config.iou_kind.lower() == "bev" else "AP_3D"
    rows = []
    for st in strata:
        matches = [
            _match(f.detections, f.ground_truths, m, config.class_name, config.iou_thresh, st.gt_filter, st.det_filter)
            for f, m in zip(frames, ious)
        ]
        aps, n_gt, pr = _pooled_ap(matches, config.positions)
        for p in config.positions:
            rows.append(APRow(st.name, config.class_name or "*", f"{metric_base}@R{p}", aps[p], n_gt, tuple(pr)))
    return rows


def evaluate(frames: Sequence[FrameEvalRecord], config: EvalConfig = EvalConfig()) -> list[APRow]:
    if not 0.0 < config.iou_thresh < 1.0:
        raise ValueError(f"IoU threshold {config.iou_thresh} outside (0, 1)")
    return evaluate_strata(frames, strata_for(config.stratifier), config)


def pc_bins(bin_edges: Sequence[float]) -> list[tuple[float, float]]:
    edges = list(bin_edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])) or edges[0] < 0 or edges[-1] > 1:
        raise ValueError(f"bin edges must ascend within [0, 1]: {edges}")
    return list(zip(edges[:-1], edges[1:]))


def pc_binned_ap(
    frames: Sequence[FrameEvalRecord],
    bin_edges: Sequence[float],
    config: EvalConfig = EvalConfig(stratifier="none"),
    positions: int = 11,
    base_filter: Optional[GtFilter] = None,
) -> list[tuple[float, float, Optional[float]]]:
    """AP restricted to ground truths whose completeness falls in each bin.

    Out-of-bin ground truths are ignored (not missed) and detections
    matched to them are dropped. Bins are half-open; the last one is
    closed at its upper edge.
    """
    bins = pc_bins(bin_edges)
    ious = _frame_ious(frames, config.iou_kind)
    out = []
    for k, (lo, hi) in enumerate(bins):
        last = k == len(bins) - 1

        def in_bin(g, lo=lo, hi=hi, last=last):
            ok = lo <= g.q < hi or (last and g.q == hi)
            return ok and (base_filter is None or base_filter(g))

        cfg = EvalConfig(config.class_name, config.iou_kind, config.iou_thresh, (positions,), "none")
        row = evaluate_strata(frames, [Stratum(f"pc[{lo:g},{hi:g})", in_bin)], cfg, ious)[0]
        out.append((lo, hi, row.ap))
    return out


@dataclass(frozen=True)
class ErrorBreakdown:
    correct: int
    mis_localized: int
    background: int
    score_threshold: float

    @property
    def total(self) -> int:
        return self.correct + self.mis_localized + self.background

    def ratios(self) -> tuple[float, float, float]:
        n = self.total
        if n == 0:
            return (0.0, 0.0, 0.0)
        return (self.correct / n, self.mis_localized / n, self.background / n)


def error_analysis(
    frames: Sequence[FrameEvalRecord],
    score_threshold: float,
    class_name: Optional[str] = None,
    iou_kind: str = "3d",
) -> ErrorBreakdown:
    """Bucket confident detections by their best IoU with any same-class GT.

    Correct: IoU >= 0.7; mis-localized: [0.5, 0.7); background: below 0.5.
    """
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"score threshold {score_threshold} outside [0, 1]")
    fn = _iou_fn(iou_kind)
    counts = [0, 0, 0]
    for f in frames:
        for d in f.detections:
            if d.score <= score_threshold or (class_name is not None and d.class_name != class_name):
                continue
            best = max((fn(d.box, g.box) for g in f.ground_truths if g.class_name == d.class_name), default=0.0)
            counts[0 if best >= 0.7 else 1 if best >= 0.5 else 2] += 1
    return ErrorBreakdown(counts[0], counts[1], counts[2], score_threshold)
