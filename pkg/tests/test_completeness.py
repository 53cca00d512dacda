import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade3d.completeness import (
    SparsityLevel,
    Strategy,
    pc_score,
    pc_score_histogram,
    sparsity_counts,
    sparsity_level,
    strategy_scores,
    task_weights,
)
from cascade3d.geometry import Box3D, Flip, PointCloud, RotateZ, Scale, apply_global_transform, iou_3d

B = Box3D(5, -2, -0.8, 4, 2, 1.5, 0.6)


def half_span_points(box):
    # local x spans [-l/4, l/4], full y and z
    local = np.array([(x, y, z) for x in (-box.l / 4, box.l / 4) for y in (-box.w / 2, box.w / 2) for z in (-box.h / 2, box.h / 2)])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return PointCloud(local @ rot.T + box.center)


class TestPcScore:
    def test_corners(self):
        r = pc_score(B, PointCloud(B.corners()))
        assert r.score == pytest.approx(1.0, abs=1e-9)
        assert r.point_count == 8

    def test_single_point(self):
        r = pc_score(B, PointCloud(B.center[None]))
        assert r.score == 0.0 and r.point_count == 1

    def test_half_extent(self):
        assert pc_score(B, half_span_points(B)).score == pytest.approx(0.5, abs=1e-9)

    def test_empty_cloud(self):
        r = pc_score(B, PointCloud.empty())
        assert r.score == 0.0 and r.point_count == 0

    def test_points_outside_ignored(self):
        pts = np.vstack([B.corners(), [[100, 100, 100]]])
        r = pc_score(B, PointCloud(pts))
        assert r.point_count == 8 and r.score == pytest.approx(1.0)

    def test_degenerate_gt(self):
        with pytest.raises(ValueError, match="degenerate ground-truth box"):
            pc_score(Box3D(0, 0, 0, 0, 1, 1), PointCloud.empty())

    @given(st.integers(0, 100_000), st.sampled_from(["flip", "scale", "rot"]))
    @settings(max_examples=100)
    def test_transform_invariance(self, seed, kind):
        rng = np.random.default_rng(seed)
        box = Box3D(*rng.uniform(-20, 20, 3), *rng.uniform(0.5, 5, 3), rng.uniform(-4, 4))
        local = rng.uniform(-0.5, 0.5, size=(40, 3)) * box.extents
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        pts = PointCloud(local @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T + box.center)
        t = {"flip": Flip(), "scale": Scale(float(rng.uniform(0.95, 1.05))), "rot": RotateZ(float(rng.uniform(-math.pi, math.pi)))}[kind]
        p2, (b2,) = apply_global_transform(pts, [box], t)
        assert pc_score(b2, p2).score == pytest.approx(pc_score(box, pts).score, abs=1e-9)

    @given(st.integers(0, 100_000))
    @settings(max_examples=50)
    def test_monotone_in_points(self, seed):
        rng = np.random.default_rng(seed)
        local = rng.uniform(-0.5, 0.5, size=(10, 3)) * B.extents
        pts = PointCloud(local + B.center) if B.yaw == 0 else None
        box = Box3D(0, 0, 0, 4, 2, 1.5, 0)
        pts = PointCloud(local)
        extra = rng.uniform(-0.5, 0.5, size=(1, 3)) * box.extents
        q0 = pc_score(box, pts).score
        q1 = pc_score(box, PointCloud(np.vstack([local, extra]))).score
        assert q1 >= q0 - 1e-15


class TestTaskWeights:
    def test_hand_case(self):
        w = task_weights([0.2, 0.6], [True, True])
        np.testing.assert_allclose(w.weights, [0.5, 1.5], atol=1e-12)

    def test_equal_scores(self):
        w = task_weights([0.4] * 5, [True] * 5)
        np.testing.assert_allclose(w.weights, 1.0)

    def test_negative_weight_one(self):
        w = task_weights([0.2, 0.0, 0.6], [True, False, True])
        assert w.weights[1] == 1.0

    def test_all_zero_positive_fallback(self):
        w = task_weights([0.0, 0.0, 0.0], [True, True, False])
        np.testing.assert_array_equal(w.weights, [1.0, 1.0, 1.0])

    def test_negative_score_rejected(self):
        with pytest.raises(ValueError):
            task_weights([-0.1], [True])

    def test_softmax_variant(self):
        w = task_weights([0.2, 0.6], [True, True], Strategy.SOFTMAX)
        e = np.exp([0.2, 0.6])
        np.testing.assert_allclose(w.weights, 2 * e / e.sum())

    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=50), st.sampled_from(list(Strategy)))
    def test_mass_and_order(self, items, strategy):
        s = [a for a, _ in items]
        m = [b for _, b in items]
        w = task_weights(s, m, strategy).weights
        pos = [i for i, b in enumerate(m) if b]
        if pos:
            assert sum(w[i] for i in pos) == pytest.approx(len(pos), abs=1e-9)
        for i, b in enumerate(m):
            if not b:
                assert w[i] == 1.0
        if sum(s[i] for i in pos) > 0:
            for i in pos:
                for j in pos:
                    if s[i] > s[j] and (strategy is not Strategy.SOFTMAX or s[i] - s[j] > 1e-9):
                        assert w[i] > w[j]

    def test_strategy_scores(self):
        gt = Box3D(0, 0, 0, 4, 2, 1.5, 0)
        res = pc_score(gt, half_span_points(gt))
        prop = Box3D(0.5, 0, 0, 4, 2, 1.5, 0)
        args = ([prop, prop], [0, -1], [res], [gt])
        np.testing.assert_allclose(strategy_scores(Strategy.PC_SCORE, *args), [0.5, 0])
        np.testing.assert_allclose(strategy_scores(Strategy.IOU_V1, *args), [iou_3d(prop, gt), 0])
        np.testing.assert_allclose(strategy_scores(Strategy.IOU_V2, *args), [iou_3d(prop, res.enclosing_box), 0])


class TestSparsity:
    @pytest.mark.parametrize(
        "q,level",
        [(0.2, SparsityLevel.SPARSE), (0.45, SparsityLevel.MODEST), (0.6, SparsityLevel.COMPLETE),
         (0.3, SparsityLevel.MODEST), (0.0, SparsityLevel.SPARSE), (1.0, SparsityLevel.COMPLETE)],
    )
    def test_levels(self, q, level):
        assert sparsity_level(q) is level

    @pytest.mark.parametrize("q", [-0.1, 1.01, float("nan")])
    def test_out_of_range(self, q):
        with pytest.raises(ValueError):
            sparsity_level(q)

    def test_counts(self):
        c = sparsity_counts([0.1, 0.2, 0.5, 0.9])
        assert c == {SparsityLevel.SPARSE: 2, SparsityLevel.MODEST: 1, SparsityLevel.COMPLETE: 1}


class TestHistogram:
    def test_all_zero(self):
        h = pc_score_histogram([0.0, 0.0, 0.0], 0.05)
        nonzero = [(lo, hi, f) for lo, hi, f in h if f > 0]
        assert nonzero == [(0.0, 0.05, 1.0)]

    def test_two_bins(self):
        assert pc_score_histogram([0.1, 0.9], 0.5) == [(0.0, 0.5, 0.5), (0.5, 1.0, 0.5)]

    def test_boundaries(self):
        h = pc_score_histogram([0.5, 1.0], 0.5)
        assert [f for _, _, f in h] == [0.0, 1.0]
        h = pc_score_histogram([0.05], 0.05)
        assert h[1][2] == 1.0

    def test_empty(self):
        assert pc_score_histogram([], 0.05) == []

    def test_bad_width(self):
        with pytest.raises(ValueError):
            pc_score_histogram([0.1], 0.3)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=200))
    def test_sums_to_one(self, qs):
        assert sum(f for _, _, f in pc_score_histogram(qs, 0.05)) == pytest.approx(1.0, abs=1e-9)
