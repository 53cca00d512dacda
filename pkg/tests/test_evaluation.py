import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade3d.dataset_io import DetectionRecord, Difficulty
from cascade3d.evaluation import (
    DetStatus,
    EvalConfig,
    FrameEvalRecord,
    GroundTruth,
    GtStatus,
    PRPoint,
    Stratum,
    ap_interpolated,
    error_analysis,
    evaluate,
    evaluate_strata,
    iou_matrix,
    match_detections,
    pc_binned_ap,
    pr_curve,
)
from cascade3d.geometry import Box3D, iou_3d

from oracles import ap_by_thresholds, best_assignment_tp

GT_BOX = Box3D(10, 0, -0.8, 4, 2, 1.5, 0)


def shifted(box, dx):
    return Box3D(box.cx + dx, box.cy, box.cz, box.l, box.w, box.h, box.yaw)


def shift_for_iou(box, target):
    # along x with full y/z overlap: IoU = (l - d) / (l + d)
    return shifted(box, box.l * (1 - target) / (1 + target))


def det(box, score, cls="Car", fid="0"):
    return DetectionRecord(fid, box, cls, score)


def gt(box, cls="Car", diff=Difficulty.EASY, q=1.0, n=100):
    return GroundTruth(box, cls, diff, q, n)


class TestMatching:
    def test_tp(self):
        f = FrameEvalRecord("0", [det(shift_for_iou(GT_BOX, 0.8), 0.9)], [gt(GT_BOX)])
        m = match_detections(f, "3d", 0.7)
        assert m.det_status.tolist() == [DetStatus.TP]
        assert m.gt_status.tolist() == [GtStatus.MATCHED]

    def test_duplicate(self):
        d1 = det(shift_for_iou(GT_BOX, 0.75), 0.6)
        d2 = det(shift_for_iou(GT_BOX, 0.9), 0.8)
        f = FrameEvalRecord("0", [d1, d2], [gt(GT_BOX)])
        m = match_detections(f, "3d", 0.7)
        # score order: d2 first
        assert m.det_index.tolist() == [1, 0]
        assert m.det_status.tolist() == [DetStatus.TP, DetStatus.FP]
        assert m.num_tp == best_assignment_tp(iou_matrix(f.detections, f.ground_truths), 0.7)

    def test_below_threshold(self):
        f = FrameEvalRecord("0", [det(shift_for_iou(GT_BOX, 0.65), 0.9)], [gt(GT_BOX)])
        m = match_detections(f, "3d", 0.7)
        assert m.det_status.tolist() == [DetStatus.FP]
        assert m.gt_status.tolist() == [GtStatus.MISSED]

    def test_ignored_gt_absorbs(self):
        f = FrameEvalRecord("0", [det(GT_BOX, 0.9)], [gt(GT_BOX, diff=Difficulty.HARD)])
        m = match_detections(f, "3d", 0.7, gt_filter=lambda g: g.difficulty <= Difficulty.EASY)
        assert m.det_status.tolist() == [DetStatus.IGNORED]
        assert m.gt_status.tolist() == [GtStatus.IGNORED]

    def test_other_class_not_matched(self):
        f = FrameEvalRecord("0", [det(GT_BOX, 0.9, cls="Pedestrian")], [gt(GT_BOX)])
        m = match_detections(f, "3d", 0.7, class_name="Car")
        assert len(m.det_status) == 0 and m.gt_status.tolist() == [GtStatus.MISSED]

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            match_detections(FrameEvalRecord("0"), "3d", 1.0)

    @given(st.integers(0, 100_000))
    @settings(max_examples=100)
    def test_tp_bound(self, seed):
        rng = np.random.default_rng(seed)
        gts = [gt(Box3D(*rng.uniform(-3, 3, 2), 0, 4, 2, 1.5, rng.uniform(-1, 1))) for _ in range(rng.integers(0, 4))]
        dets = [det(Box3D(*rng.uniform(-3, 3, 2), 0, 4, 2, 1.5, rng.uniform(-1, 1)), float(rng.uniform())) for _ in range(rng.integers(0, 5))]
        f = FrameEvalRecord("0", dets, gts)
        m = match_detections(f, "bev", 0.3)
        assert m.num_tp <= min(len(dets), len(gts))
        assert m.num_tp <= best_assignment_tp(iou_matrix(dets, gts, "bev"), 0.3) if dets and gts else m.num_tp == 0


class TestAP:
    def test_perfect(self):
        pr = pr_curve([0.9, 0.8, 0.7], [True, True, True], 3)
        assert ap_interpolated(pr, 11, 3) == 1.0
        assert ap_interpolated(pr, 40, 3) == 1.0

    def test_half_recall(self):
        pr = pr_curve([0.9], [True], 2)
        assert ap_interpolated(pr, 11, 2) == pytest.approx(6 / 11)
        assert ap_interpolated(pr, 40, 2) == pytest.approx(0.5)

    def test_no_detections(self):
        assert ap_interpolated(pr_curve([], [], 4), 11, 4) == 0.0

    def test_no_gt(self):
        assert ap_interpolated([], 40, 0) is None

    def test_bad_positions(self):
        with pytest.raises(ValueError):
            ap_interpolated([], 12, 1)

    def test_ties_grouped(self):
        a = pr_curve([0.5, 0.5], [True, False], 1)
        b = pr_curve([0.5, 0.5], [False, True], 1)
        assert a == b
        assert ap_interpolated(a, 11, 1) == pytest.approx(0.5)

    @given(st.lists(st.tuples(st.integers(0, 10), st.booleans()), max_size=8), st.integers(0, 4), st.sampled_from([11, 40]))
    def test_matches_oracle(self, dets, extra_gt, positions):
        num_gt = sum(tp for _, tp in dets) + extra_gt
        scores = [s / 10 for s, _ in dets]
        got = ap_interpolated(pr_curve(scores, [t for _, t in dets], num_gt), positions, num_gt)
        want = ap_by_thresholds([(Fraction(s, 10), t) for s, t in dets], num_gt, positions)
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(float(want), abs=1e-12)

    @given(st.lists(st.tuples(st.integers(0, 10), st.booleans()), max_size=8), st.integers(0, 3))
    def test_invariant_to_monotone_rescoring(self, dets, extra_gt):
        num_gt = sum(t for _, t in dets) + extra_gt
        flags = [t for _, t in dets]
        a = pr_curve([s / 10 for s, _ in dets], flags, num_gt)
        b = pr_curve([math.exp(s) - 7.0 for s, _ in dets], flags, num_gt)
        assert ap_interpolated(a, 40, num_gt) == ap_interpolated(b, 40, num_gt)

    def test_points_without_counts(self):
        pr = [PRPoint(0.5, 1.0)]
        assert ap_interpolated(pr, 11, 2) == pytest.approx(6 / 11)

    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=10), st.integers(0, 3), st.integers(0, 9))
    def test_monotone_under_improvement(self, dets, extra_gt, pick):
        num_gt = sum(t for _, t in dets) + extra_gt
        tps = [i for i, (_, t) in enumerate(dets) if t]
        if not tps or num_gt == 0:
            return
        i = tps[pick % len(tps)]
        before = ap_interpolated(pr_curve([s for s, _ in dets], [t for _, t in dets], num_gt), 40, num_gt)
        top = max(s for s, _ in dets) + 1.0
        improved = list(dets)
        improved[i] = (top, True)
        after = ap_interpolated(pr_curve([s for s, _ in improved], [t for _, t in improved], num_gt), 40, num_gt)
        assert after >= before - 1e-12


def perfect_frames():
    boxes = [Box3D(d, s, -0.8, 4, 1.7, 1.5, 0.1) for d, s in ((10, 2), (35, -4), (60, 5), (20, -8))]
    gts = [
        GroundTruth(b, "Car", diff, 0.5, pts)
        for b, diff, pts in zip(boxes, [Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD, Difficulty.EASY], [100, 20, 3, 8])
    ]
    return [FrameEvalRecord("0", [det(b, 1.0) for b in boxes], gts)]


class TestEvaluate:
    def test_perfect_kitti(self):
        rows = evaluate(perfect_frames(), EvalConfig("Car", "3d", 0.7, (11, 40), "kitti"))
        assert {r.stratum for r in rows} == {"Easy", "Moderate", "Hard"}
        assert all(r.ap == 1.0 for r in rows)

    def test_kitti_cumulative(self):
        rows = evaluate(perfect_frames(), EvalConfig("Car", "3d", 0.7, (40,), "kitti"))
        assert {r.stratum: r.num_gt for r in rows} == {"Easy": 2, "Moderate": 3, "Hard": 4}

    def test_perfect_waymo(self):
        rows = evaluate(perfect_frames(), EvalConfig("Car", "bev", 0.7, (40,), "waymo"))
        assert all(r.ap == 1.0 for r in rows if r.num_gt)
        counts = {r.stratum: r.num_gt for r in rows}
        assert counts["LEVEL_1"] == 3  # the 3-point GT fails the >= 5 rule
        assert counts["LEVEL_2"] == 4
        assert counts["LEVEL_2/0-30m"] == 2 and counts["LEVEL_2/30-50m"] == 1 and counts["LEVEL_2/50m-inf"] == 1

    def test_level_rules(self):
        five = GroundTruth(GT_BOX, "Car", None, 0.5, 5)
        zero = GroundTruth(GT_BOX, "Car", None, 0.0, 0)
        for g, n1, n2 in ((five, 1, 1), (zero, 0, 0)):
            rows = evaluate([FrameEvalRecord("0", [], [g])], EvalConfig("Car", "3d", 0.7, (40,), "waymo"))
            counts = {r.stratum: r.num_gt for r in rows}
            assert (counts["LEVEL_1"], counts["LEVEL_2"]) == (n1, n2)

    def test_empty_stratum_no_gt(self):
        rows = evaluate([FrameEvalRecord("0", [], [])], EvalConfig("Car", "3d", 0.7, (11,), "kitti"))
        assert all(r.ap is None for r in rows)

    @given(st.integers(0, 100_000))
    @settings(max_examples=30)
    def test_single_inclusive_stratum(self, seed):
        rng = np.random.default_rng(seed)
        frames = []
        for k in range(3):
            gts = [gt(Box3D(*rng.uniform(0, 6, 2), 0, 4, 2, 1.5, rng.uniform(-1, 1))) for _ in range(3)]
            dets = [det(Box3D(*rng.uniform(0, 6, 2), 0, 4, 2, 1.5, rng.uniform(-1, 1)), float(rng.uniform()), fid=str(k)) for _ in range(4)]
            frames.append(FrameEvalRecord(str(k), dets, gts))
        cfg = EvalConfig("Car", "bev", 0.5, (11, 40), "none")
        a = evaluate(frames, cfg)
        b = evaluate_strata(frames, [Stratum("everything", lambda g: True, lambda d: True)], cfg)
        assert [r.ap for r in a] == [r.ap for r in b]
        assert [r.pr for r in a] == [r.pr for r in b]


class TestPcBinned:
    def test_split(self):
        lo = [GroundTruth(Box3D(10, 5 * i, 0, 4, 2, 1.5, 0), "Car", None, 0.2) for i in range(3)]
        hi = [GroundTruth(Box3D(30, 5 * i, 0, 4, 2, 1.5, 0), "Car", None, 0.8) for i in range(3)]
        frames = [FrameEvalRecord("0", [det(g.box, 0.9) for g in hi], lo + hi)]
        res = pc_binned_ap(frames, [0, 0.5, 1.0])
        assert [ap for _, _, ap in res] == [0.0, 1.0]

    def test_empty_bins(self):
        gts = [GroundTruth(GT_BOX, "Car", None, 0.9)]
        res = pc_binned_ap([FrameEvalRecord("0", [det(GT_BOX, 0.9)], gts)], [0, 0.3, 0.6, 1.0])
        assert [ap for _, _, ap in res] == [None, None, 1.0]

    def test_top_edge_closed(self):
        gts = [GroundTruth(GT_BOX, "Car", None, 1.0)]
        res = pc_binned_ap([FrameEvalRecord("0", [det(GT_BOX, 0.9)], gts)], [0, 0.5, 1.0])
        assert res[-1][2] == 1.0

    def test_recall_proportional_to_q(self):
        # simulation: each GT detected exactly with probability Q, plus scattered false alarms
        rng = np.random.default_rng(0)
        frames = []
        for k in range(200):
            gts, dets = [], []
            for j in range(10):
                q = float(rng.uniform())
                b = Box3D(10 + 8 * j, float(rng.uniform(-20, 20)), -0.8, 4, 1.7, 1.5, 0)
                gts.append(GroundTruth(b, "Car", None, q))
                if rng.uniform() < q:
                    dets.append(det(b, float(rng.uniform(0.3, 1.0)), fid=str(k)))
            for _ in range(2):
                dets.append(det(Box3D(float(rng.uniform(0, 90)), 60.0, -0.8, 4, 1.7, 1.5, 0), float(rng.uniform()), fid=str(k)))
            frames.append(FrameEvalRecord(str(k), dets, gts))
        aps = [ap for _, _, ap in pc_binned_ap(frames, [0, 0.2, 0.4, 0.6, 0.8, 1.0])]
        assert all(b >= a for a, b in zip(aps, aps[1:]))


class TestErrorAnalysis:
    def frame(self):
        return FrameEvalRecord(
            "0",
            [det(shift_for_iou(GT_BOX, 0.65), 0.95), det(shift_for_iou(GT_BOX, 0.8), 0.9),
             det(Box3D(50, 50, 0, 4, 2, 1.5, 0), 0.8), det(GT_BOX, 0.5)],
            [gt(GT_BOX)],
        )

    def test_buckets(self):
        b = error_analysis([self.frame()], 0.7)
        assert (b.correct, b.mis_localized, b.background) == (1, 1, 1)
        assert sum(b.ratios()) == pytest.approx(1.0)

    def test_strict_threshold(self):
        assert error_analysis([self.frame()], 0.9).total == 1

    def test_no_gt_all_background(self):
        f = FrameEvalRecord("0", [det(GT_BOX, 0.9), det(GT_BOX, 0.8)], [])
        b = error_analysis([f], 0.7)
        assert (b.correct, b.mis_localized, b.background) == (0, 0, 2)

    def test_iou_helper(self):
        assert iou_3d(shift_for_iou(GT_BOX, 0.65), GT_BOX) == pytest.approx(0.65)
