"""Cascade detection-head simulation with pluggable refiners.

No network lives here. A refiner stands in for one detection-head stage:
it maps a proposal to a refined box and a confidence. The built-in
refiners move proposals toward the ground truth so that the multi-stage
behavior (iterative refinement, mean-fused confidence, re-weighted losses)
can be exercised without training anything.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from .completeness import Strategy, TaskWeights, task_weights
from .dataset_io import DetectionRecord
from .geometry import Box3D, PointCloud, iou_3d, iou_bev, wrap_angle


@dataclass
class Scene:
    gt_boxes: list[Box3D] = field(default_factory=list)
    cloud: Optional[PointCloud] = None


class Refiner(Protocol):
    """One detection-head stage.

    ``refine`` must be deterministic given ``rng``, return a confidence in
    [0, 1] and a box with positive extents.
    """

    concurrent_safe: bool

    def refine(self, proposal: Box3D, scene: Scene, rng: np.random.Generator) -> tuple[Box3D, float]: ...


def best_gt(box: Box3D, gts: Sequence[Box3D]) -> tuple[int, float]:
    """Index and 3D IoU of the best-overlapping ground truth (-1, 0 if none)."""
    best_j, best = -1, 0.0
    for j, g in enumerate(gts):
        v = iou_3d(box, g)
        if v > best:
            best_j, best = j, v
    return best_j, best


@dataclass
class IdentityRefiner:
    confidence: float = 0.7
    concurrent_safe: bool = True

    def refine(self, proposal, scene, rng):
        return proposal, self.confidence


def contract(box: Box3D, target: Box3D, lam: float) -> Box3D:
    """Move every box parameter a fraction ``lam`` of the way to ``target``."""
    dyaw = wrap_angle(target.yaw - box.yaw)
    return Box3D(
        box.cx + lam * (target.cx - box.cx),
        box.cy + lam * (target.cy - box.cy),
        box.cz + lam * (target.cz - box.cz),
        box.l + lam * (target.l - box.l),
        box.w + lam * (target.w - box.w),
        box.h + lam * (target.h - box.h),
        box.yaw + lam * dyaw,
    )


@dataclass
class ContractionRefiner:
    """Pull each proposal a fraction ``lam`` toward its best-overlapping GT.

    Proposals touching no ground truth are returned unchanged with
    confidence 0; otherwise the confidence is the refined box's IoU.
    """

    lam: float = 0.5
    concurrent_safe: bool = True

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"contraction factor {self.lam} outside (0, 1]")

    def _perturb(self, box: Box3D, rng: np.random.Generator) -> Box3D:
        return box

    def refine(self, proposal, scene, rng):
        j, _ = best_gt(proposal, scene.gt_boxes)
        if j < 0:
            return proposal, 0.0
        gt = scene.gt_boxes[j]
        out = self._perturb(contract(proposal, gt, self.lam), rng)
        return out, iou_3d(out, gt)


@dataclass
class JitteredContractionRefiner(ContractionRefiner):
    """Contraction followed by Gaussian noise on center, extents and yaw.

    ``sigma_center`` is in meters, ``sigma_extent`` relative to each
    extent, ``sigma_yaw`` in radians.
    """

    sigma_center: float = 0.05
    sigma_extent: float = 0.02
    sigma_yaw: float = 0.01

    def _perturb(self, box, rng):
        dc = rng.normal(0.0, self.sigma_center, 3)
        de = rng.normal(0.0, self.sigma_extent, 3)
        dy = rng.normal(0.0, self.sigma_yaw)
        ext = np.maximum(box.extents * (1.0 + de), 1e-3)
        return Box3D(box.cx + dc[0], box.cy + dc[1], box.cz + dc[2], ext[0], ext[1], ext[2], box.yaw + dy)


@dataclass
class IoUConfidenceScorer:
    """Wrap a refiner and score its output with the IoU-guided ramp."""

    inner: Refiner
    lo: float = 0.25
    hi: float = 0.75

    @property
    def concurrent_safe(self) -> bool:
        return self.inner.concurrent_safe

    def refine(self, proposal, scene, rng):
        box, _ = self.inner.refine(proposal, scene, rng)
        _, iou = best_gt(box, scene.gt_boxes)
        return box, iou_guided_confidence_target(iou, self.lo, self.hi)


# --- cascade ---------------------------------------------------------------


@dataclass(frozen=True)
class StageTrace:
    boxes: tuple[Box3D, ...]
    confidences: tuple[float, ...]

    @property
    def stages(self) -> int:
        return len(self.boxes)

    @property
    def confidence(self) -> float:
        return math.fsum(self.confidences) / len(self.confidences)

    @property
    def box(self) -> Box3D:
        return self.boxes[-1]


class CascadeError(RuntimeError):
    pass


def proposal_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _trace_one(i: int, proposal: Box3D, refiner: Refiner, stages: int, scene: Scene, seed: int) -> StageTrace:
    rng = proposal_rng(seed, i)
    box = proposal
    boxes, confs = [], []
    try:
        for _ in range(stages):
            box, conf = refiner.refine(box, scene, rng)
            if not 0.0 <= conf <= 1.0:
                raise ValueError(f"confidence {conf} outside [0, 1]")
            if min(box.l, box.w, box.h) <= 0.0:
                raise ValueError("refined box has non-positive extent")
            boxes.append(box)
            confs.append(float(conf))
    except Exception as exc:
        raise CascadeError(f"refiner failed on proposal {i}: {exc}") from exc
    return StageTrace(tuple(boxes), tuple(confs))


def run_cascade(
    proposals: Sequence[Box3D],
    refiner: Refiner,
    stages: int,
    scene: Scene,
    seed: int = 0,
    threads: int = 1,
) -> list[StageTrace]:
    """Refine every proposal through ``stages`` consecutive refiner passes.

    Stage t consumes the boxes of stage t-1. Each proposal draws from its
    own generator seeded by ``(seed, index)``, so threading never changes
    the result.
    """
    if stages < 1:
        raise ValueError("need at least one stage")
    args = [(i, p, refiner, stages, scene, seed) for i, p in enumerate(proposals)]
    if threads > 1 and getattr(refiner, "concurrent_safe", False):
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda a: _trace_one(*a), args))
    return [_trace_one(*a) for a in args]


# --- RoI sampling -----------------------------------------------------------


@dataclass(frozen=True)
class RoiSample:
    indices: np.ndarray
    positive_mask: np.ndarray
    matched_gt: np.ndarray
    ious: np.ndarray


def sample_rois(
    proposals: Sequence[Box3D],
    gts: Sequence[Box3D],
    count: int = 128,
    fg_iou: float = 0.55,
    seed: int = 0,
    fg_fraction: float = 0.5,
) -> RoiSample:
    """Draw up to ``count`` proposals aiming at a 1:1 foreground/background mix.

    Foreground means best-GT 3D IoU >= ``fg_iou``. If either side runs
    short the other fills the remainder; sampling is without replacement.
    """
    if count <= 0:
        raise ValueError("sample count must be positive")
    m = len(proposals)
    if m == 0:
        e = np.zeros(0, dtype=np.int64)
        return RoiSample(e, np.zeros(0, bool), e, np.zeros(0))
    matched = np.full(m, -1, dtype=np.int64)
    ious = np.zeros(m)
    for i, p in enumerate(proposals):
        matched[i], ious[i] = best_gt(p, gts)
    fg = np.flatnonzero(ious >= fg_iou)
    bg = np.flatnonzero(ious < fg_iou)
    n_fg = min(len(fg), int(round(count * fg_fraction)))
    n_bg = min(len(bg), count - n_fg)
    n_fg = min(len(fg), count - n_bg)
    rng = np.random.default_rng(seed)
    pick = np.concatenate([
        rng.choice(fg, n_fg, replace=False) if n_fg else fg[:0],
        rng.choice(bg, n_bg, replace=False) if n_bg else bg[:0],
    ]).astype(np.int64)
    pos = np.arange(len(pick)) < n_fg
    gt_idx = np.where(pos, matched[pick], -1)
    return RoiSample(pick, pos, gt_idx, ious[pick])


# --- losses -----------------------------------------------------------------


def smooth_l1(residual, beta: float = 1.0):
    """Quadratic below ``beta``, linear above; works elementwise on arrays."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    r = np.abs(np.asarray(residual, dtype=np.float64))
    out = np.where(r < beta, 0.5 * r * r / beta, r - 0.5 * beta)
    return float(out) if out.ndim == 0 else out


def binary_cross_entropy(p, target, eps: float = 1e-7):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    t = np.asarray(target, dtype=np.float64)
    out = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def iou_guided_confidence_target(iou: float, lo: float = 0.25, hi: float = 0.75) -> float:
    if not lo < hi:
        raise ValueError("need lo < hi")
    return min(1.0, max(0.0, (iou - lo) / (hi - lo)))


def box_residual(box: Box3D, target: Box3D) -> np.ndarray:
    d = box.as_array() - target.as_array()
    d[6] = wrap_angle(box.yaw - target.yaw)
    return d


@dataclass(frozen=True)
class LossBreakdown:
    """Per-proposal, per-stage terms; arrays have shape (M, T)."""

    confidence: np.ndarray
    regression: np.ndarray
    weights: np.ndarray
    stage_totals: np.ndarray
    total: float

    @property
    def per_proposal(self) -> np.ndarray:
        return (self.weights * (self.confidence + self.regression)).sum(axis=1)


WeightSpec = Union[TaskWeights, Sequence[TaskWeights], np.ndarray, Sequence[float]]


def _weight_matrix(weights: WeightSpec, m: int, t: int) -> np.ndarray:
    if isinstance(weights, TaskWeights):
        w = np.repeat(weights.weights[:, None], t, axis=1)
    elif isinstance(weights, (list, tuple)) and weights and isinstance(weights[0], TaskWeights):
        w = np.stack([tw.weights for tw in weights], axis=1)
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = np.repeat(w[:, None], t, axis=1) if w.ndim == 1 else w
    if w.shape != (m, t):
        raise ValueError(f"weights have shape {w.shape}, expected {(m, t)}")
    return w


def stage_loss(
    traces: Sequence[StageTrace],
    weights: WeightSpec,
    conf_targets,
    reg_targets: Sequence[Optional[Box3D]],
    beta: float = 1.0,
) -> LossBreakdown:
    """Weighted cascade-head loss summed over stages.

    For proposal m at stage t the term is ``w * (bce(c, target) + reg)``,
    where ``reg`` is the smooth-L1 sum over the seven box residuals against
    ``reg_targets[m]`` and is zero for negatives (``None`` target).
    ``conf_targets`` is (M,) or (M, T). ``weights`` is one TaskWeights, one
    per stage, or a raw (M,) / (M, T) array.
    """
    m = len(traces)
    t = traces[0].stages if m else 0
    if any(tr.stages != t for tr in traces):
        raise ValueError("traces have differing stage counts")
    if len(reg_targets) != m:
        raise ValueError("need one regression target (or None) per proposal")
    w = _weight_matrix(weights, m, t)
    ct = np.asarray(conf_targets, dtype=np.float64)
    ct = np.repeat(ct[:, None], t, axis=1) if ct.ndim == 1 else ct
    if ct.shape != (m, t):
        raise ValueError(f"confidence targets have shape {ct.shape}, expected {(m, t)}")
    if np.any((ct < 0) | (ct > 1)):
        raise ValueError("confidence target outside [0, 1]")
    conf = np.array([tr.confidences for tr in traces], dtype=np.float64).reshape(m, t)
    l_con = binary_cross_entropy(conf, ct).reshape(m, t)
    l_reg = np.zeros((m, t))
    for i, (tr, g) in enumerate(zip(traces, reg_targets)):
        if g is None:
            continue
        for k, b in enumerate(tr.boxes):
            l_reg[i, k] = smooth_l1(box_residual(b, g), beta).sum()
    per_stage = (w * (l_con + l_reg)).sum(axis=0)
    return LossBreakdown(l_con, l_reg, w, per_stage, float(per_stage.sum()))


# --- NMS and inference --------------------------------------------------------


def _nms_order(dets: Sequence[DetectionRecord]) -> list[int]:
    # box parameters break score ties so input order never matters
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, tuple(dets[i].box.as_array())))


def nms_rotated(dets: Sequence[DetectionRecord], iou_thresh: float, max_keep: Optional[int] = None) -> list[DetectionRecord]:
    """Greedy suppression on rotated BEV IoU; survivors in descending score."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"NMS threshold {iou_thresh} outside (0, 1)")
    kept: list[DetectionRecord] = []
    for i in _nms_order(dets):
        if max_keep is not None and len(kept) >= max_keep:
            break
        d = dets[i]
        if all(iou_bev(d.box, k.box) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


@dataclass(frozen=True)
class InferenceConfig:
    stages: int = 3
    pre_nms: float = 0.7
    top_k: int = 100
    post_nms: float = 0.1


def inference_pipeline(
    raw_proposals: Sequence[DetectionRecord],
    refiner: Refiner,
    scene: Scene,
    config: InferenceConfig = InferenceConfig(),
    seed: int = 0,
) -> list[DetectionRecord]:
    """NMS the proposals, refine the top ones through the cascade, fuse, NMS again."""
    props = nms_rotated(raw_proposals, config.pre_nms, config.top_k)
    traces = run_cascade([p.box for p in props], refiner, config.stages, scene, seed)
    refined = [replace(p, box=tr.box, score=tr.confidence) for p, tr in zip(props, traces)]
    return nms_rotated(refined, config.post_nms)


# --- synthetic experiments ------------------------------------------------------


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gen_proposals_at_iou(gt: Box3D, target_iou: float, n: int, seed: int = 0, tol: float = 0.02) -> list[Box3D]:
    """Translated copies of ``gt`` whose 3D IoU with it is ``target_iou``.

    The offset magnitude along each random direction is found by bisection;
    overlap shrinks monotonically with translation, so any target in (0, 1]
    is reachable.
    """
    if not 0.0 < target_iou <= 1.0:
        raise ValueError(f"target IoU {target_iou} outside (0, 1]")
    if target_iou == 1.0:
        return [gt] * n
    rng = np.random.default_rng(seed)
    dirs = _unit_vectors(rng, n)
    reach = float(np.linalg.norm(gt.extents)) + 1.0
    out = []
    for d in dirs:
        lo, hi = 0.0, reach
        box = gt
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            box = replace(gt, cx=gt.cx + mid * d[0], cy=gt.cy + mid * d[1], cz=gt.cz + mid * d[2])
            v = iou_3d(box, gt)
            if abs(v - target_iou) < 1e-9:
                break
            if v > target_iou:
                lo = mid
            else:
                hi = mid
        if abs(iou_3d(box, gt) - target_iou) > tol:
            raise ValueError(f"target IoU {target_iou} unreachable along direction {d.tolist()}")
        out.append(box)
    return out


DEFAULT_CAR = Box3D(10.0, 0.0, -0.8, 3.9, 1.6, 1.56, 0.3)


@dataclass(frozen=True)
class IoUGainRow:
    input_iou: float
    stages: int
    mean_output_iou: float


def experiment_iou_gain(
    refiner: Refiner,
    input_iou_grid: Sequence[float],
    stages_list: Sequence[int] = (1, 3),
    n: int = 1000,
    seed: int = 0,
    gt: Box3D = DEFAULT_CAR,
) -> list[IoUGainRow]:
    """Mean output IoU of the final box for each (input IoU, stage count).

    Every stage count sees the same proposals and per-proposal noise
    streams, so the comparison across stage counts is paired.
    """
    scene = Scene([gt])
    rows = []
    for k, x in enumerate(input_iou_grid):
        if not 0.0 < x <= 1.0:
            raise ValueError(f"input IoU {x} outside (0, 1]")
        props = gen_proposals_at_iou(gt, x, n, seed=seed + k)
        for t in stages_list:
            traces = run_cascade(props, refiner, t, scene, seed=seed)
            vals = [iou_3d(tr.box, gt) for tr in traces]
            rows.append(IoUGainRow(float(x), int(t), float(np.mean(vals))))
    return rows


@dataclass(frozen=True)
class LossBinRow:
    lo: float
    hi: float
    count: int
    loss_raw: float
    loss_reweighted: float


def experiment_loss_distribution(
    samples: Sequence[tuple[float, float]],
    bin_edges: Sequence[float],
    strategy: Strategy = Strategy.PC_SCORE,
) -> list[LossBinRow]:
    """Per-bin total positive loss with and without completeness re-weighting.

    ``samples`` holds (completeness, raw loss) pairs for positive proposals.
    """
    edges = list(bin_edges)
    if edges[0] != 0.0 or edges[-1] != 1.0 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must partition [0, 1]")
    q = np.array([s[0] for s in samples], dtype=np.float64)
    raw = np.array([s[1] for s in samples], dtype=np.float64)
    w = task_weights(q, np.ones(len(q), bool), strategy).weights
    idx = np.clip(np.searchsorted(edges, q, side="right") - 1, 0, len(edges) - 2)
    rows = []
    for k in range(len(edges) - 1):
        sel = idx == k
        rows.append(LossBinRow(edges[k], edges[k + 1], int(sel.sum()), float(raw[sel].sum()), float((w[sel] * raw[sel]).sum())))
    return rows


def synthetic_loss_samples(n: int = 2000, seed: int = 0, q_min: float = 0.05, scale: float = 0.1) -> list[tuple[float, float]]:
    """Completeness drawn uniformly in [q_min, 1) with raw loss = scale / Q."""
    rng = np.random.default_rng(seed)
    q = rng.uniform(q_min, 1.0, n)
    return [(float(v), float(scale / v)) for v in q]


def bin_spread(values: Sequence[float]) -> float:
    """Max/min ratio over non-empty (positive) bin totals."""
    v = [x for x in values if x > 0]
    return max(v) / min(v) if v else 1.0
