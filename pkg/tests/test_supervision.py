import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlqformer.config import REGRESSION_RANGES
from nlqformer.numerics import Tensor
from nlqformer.supervision import (
    assign_labels,
    diou_loss,
    focal_loss,
    generate_points,
    level_masks_for_length,
    nce_loss,
    segment_diou,
    total_loss,
)


def points_for(T0, delta=1.0):
    return generate_points(level_masks_for_length(T0), delta)


def brute_force_assign(T0, delta, start, end):
    """Loop over every point of every level with plain floats."""
    out = []
    for level in range(6):
        stride = 2 ** level
        lo, hi = REGRESSION_RANGES[level]
        for i in range(T0 // stride):
            t = (i + 0.5) * stride * delta
            left, right = t - start, end - t
            reach = max(left, right) / delta
            pos = left >= 0 and right >= 0 and lo < reach <= hi
            unit = stride * delta
            out.append((pos, (left / unit, right / unit) if pos else (0.0, 0.0)))
    return out


class TestPoints:
    def test_total_for_64(self):
        assert len(points_for(64)) == 126

    def test_timestamps(self):
        pts = points_for(64, 0.5)
        assert pts[0].timestamp == 0.25
        top = points_for(64, 1.0)
        first_top = int(np.flatnonzero(top.level == 5)[0])
        assert top[first_top].timestamp == 16.0

    def test_timestamps_increase_within_level(self):
        pts = points_for(224, 0.7)
        for l in range(6):
            assert np.all(np.diff(pts.timestamp[pts.level == l]) > 0)

    def test_ranges_tile(self):
        bounds = [r for pair in REGRESSION_RANGES for r in pair]
        assert bounds[0] == 0 and bounds[-1] == math.inf
        assert all(a == b for a, b in zip(bounds[1:-1:2], bounds[2::2]))

    def test_padding_points_excluded(self):
        pts = generate_points(level_masks_for_length(50), 1.0)
        assert len(pts) == 50 + 25 + 13 + 7 + 4 + 2
        assert pts.total == 126

    def test_rejects_bad_delta(self):
        with pytest.raises(ValueError):
            generate_points(level_masks_for_length(32), 0.0)


class TestAssign:
    def test_positive_example(self):
        pts = points_for(64)
        tg = assign_labels(pts, 2.0, 6.0)
        i = int(np.flatnonzero((pts.level == 0) & (pts.timestamp == 4.5))[0])
        j = int(np.flatnonzero((pts.level == 0) & (pts.timestamp == 3.5))[0])
        assert tg.labels[i] == 1 and tg.labels[j] == 1
        np.testing.assert_allclose(tg.offsets[i], [2.5, 1.5])
        np.testing.assert_allclose(tg.offsets[j], [1.5, 2.5])

    def test_point_at_four_seconds(self):
        # Δ=2 puts a level-0 point at exactly t=4 s inside [2, 6]
        pts = generate_points(level_masks_for_length(64), 2.0)
        tg = assign_labels(pts, 2.0, 6.0)
        i = int(np.flatnonzero((pts.level == 0) & (pts.timestamp == 3.0))[0])
        pts1 = points_for(64)
        tg1 = assign_labels(pts1, 2.0, 6.0)
        k = int(np.flatnonzero((pts1.level == 1) & (pts1.timestamp == 3.0))[0])
        assert tg.labels[i] == 1
        # level 1 at t=3: offsets (1, 3) steps, reach 3 is below the level's range
        assert tg1.labels[k] == 0

    def test_outside_negative(self):
        pts = points_for(64)
        tg = assign_labels(pts, 2.0, 6.0)
        assert not tg.labels[pts.timestamp > 6.0].any()

    def test_long_gt_goes_to_coarse_level(self):
        pts = points_for(128)
        tg = assign_labels(pts, 0.0, 100.0)
        at50 = (np.abs(pts.timestamp - 50.5) < 1e-9) & (pts.level == 0)
        assert tg.labels[at50].sum() == 0
        # reach of every positive lies in its level's range
        pos = tg.labels == 1
        reach = np.maximum(pts.timestamp[pos], 100.0 - pts.timestamp[pos])
        assert np.all(reach > pts.range_min[pos]) and np.all(reach <= pts.range_max[pos])
        assert set(pts.level[pos]) <= {4, 5}

    @pytest.mark.parametrize("bad", [(3.0, 3.0), (5.0, 2.0)])
    def test_rejects_empty_or_inverted(self, bad):
        with pytest.raises(ValueError):
            assign_labels(points_for(32), *bad)

    @settings(max_examples=60, deadline=None)
    @given(st.sampled_from([32, 64, 96, 224]), st.floats(0.25, 3.0),
           st.floats(0.0, 1.0), st.floats(0.01, 1.0))
    def test_matches_brute_force(self, T0, delta, a, b):
        duration = T0 * delta
        start = a * duration * 0.9
        end = min(duration, start + b * (duration - start) + 1e-3)
        pts = points_for(T0, delta)
        tg = assign_labels(pts, start, end)
        ref = brute_force_assign(T0, delta, start, end)
        assert [bool(p) for p, _ in ref] == list(tg.labels.astype(bool))
        np.testing.assert_allclose(tg.offsets, np.array([o for _, o in ref]), rtol=1e-12, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.0, 60.0), st.floats(0.5, 60.0), st.floats(0.3, 2.0))
    def test_positive_invariants(self, start, length, delta):
        pts = points_for(128, delta)
        tg = assign_labels(pts, start, start + length)
        pos = tg.labels == 1
        assert np.all(tg.offsets >= 0)
        assert np.all(pts.timestamp[pos] >= start) and np.all(pts.timestamp[pos] <= start + length)

    def test_center_sampling_only_removes(self):
        pts = points_for(128)
        plain = assign_labels(pts, 10.0, 70.0)
        for radius in (0.5, 1.5):
            centred = assign_labels(pts, 10.0, 70.0, center_sample=True, center_radius=radius)
            assert np.all(centred.labels <= plain.labels)
        assert assign_labels(pts, 10.0, 70.0, center_sample=True, center_radius=0.5).num_pos < plain.num_pos


class TestFocal:
    @staticmethod
    def value(logit, label):
        return float(focal_loss(Tensor(np.array([logit])), np.array([label])).data)

    def test_half_probability_positive(self):
        assert self.value(0.0, 1) == pytest.approx(-0.25 * 0.25 * math.log(0.5), abs=1e-12)
        assert round(self.value(0.0, 1), 6) == 0.043322

    def test_half_probability_negative(self):
        # exact value is 0.1299651; 0.129966 is three times the rounded positive case
        assert self.value(0.0, 0) == pytest.approx(-0.75 * 0.25 * math.log(0.5), abs=1e-12)
        assert self.value(0.0, 0) == pytest.approx(0.129966, abs=1e-6)

    def test_confident_correct_is_near_zero(self):
        assert self.value(30.0, 1) < 1e-12 and self.value(-30.0, 0) < 1e-12

    def test_normalised_by_positives(self):
        logits = Tensor(np.zeros(4))
        two = float(focal_loss(logits, np.array([1, 1, 0, 0])).data)
        assert two == pytest.approx((2 * 0.043322 + 2 * 0.129966) / 2, abs=1e-5)

    def test_valid_mask_drops_points(self):
        logits = Tensor(np.array([0.0, 5.0]))
        masked = float(focal_loss(logits, np.array([1, 0]), valid=np.array([True, False])).data)
        assert masked == pytest.approx(0.043322, abs=1e-6)

    def test_stable_for_large_logits(self):
        v = focal_loss(Tensor(np.array([-800.0, 800.0])), np.array([1, 0]))
        assert np.isfinite(v.data) and v.data > 0


class TestDIoU:
    def test_identity(self):
        seg = Tensor(np.array([[1.0, 3.0]]))
        assert float(segment_diou(seg, np.array([[1.0, 3.0]])).data[0]) == pytest.approx(0.0, abs=1e-7)

    def test_overlap(self):
        v = segment_diou(Tensor(np.array([[0.0, 2.0]])), np.array([[1.0, 3.0]]))
        assert float(v.data[0]) == pytest.approx(7 / 9, abs=1e-7)

    def test_disjoint(self):
        v = segment_diou(Tensor(np.array([[0.0, 1.0]])), np.array([[3.0, 4.0]]))
        assert float(v.data[0]) == pytest.approx(1.5625, abs=1e-7)

    def test_offsets_form(self):
        # offsets (left, right) around a common point are segments [-left, right]
        v = diou_loss(Tensor(np.array([[0.0, 2.0]])), np.array([[-1.0, 3.0]]))
        assert float(v.data) == pytest.approx(7 / 9, abs=1e-7)

    def test_empty_is_zero(self):
        assert float(diou_loss(Tensor(np.zeros((0, 2))), np.zeros((0, 2))).data) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.0, 10.0), min_size=4, max_size=4))
    def test_bounded(self, xs):
        a, b, c, d = xs
        v = float(segment_diou(Tensor(np.array([[min(a, b), max(a, b) + 0.1]])),
                               np.array([[min(c, d), max(c, d) + 0.1]])).data[0])
        assert -1e-9 <= v <= 2.0


class TestNCE:
    def test_all_positive_is_zero(self):
        z = Tensor(np.random.default_rng(0).standard_normal((5, 3)))
        v = nce_loss(z, np.ones(5, bool), None, Tensor(np.ones(3)))
        assert float(v.data) == pytest.approx(0.0, abs=1e-12)

    def test_equal_similarity_pair(self):
        z = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        v = nce_loss(z, np.array([True, False]), None, Tensor(np.array([0.3, 0.7])))
        assert float(v.data) == pytest.approx(math.log(2), abs=1e-9)

    def test_separated_positive_goes_to_zero(self):
        z = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]))
        v = nce_loss(z, np.array([True, False, False]), None, Tensor(np.array([1.0, 0.0])), 0.01)
        assert float(v.data) < 1e-30

    def test_zero_vector_is_finite(self):
        z = Tensor(np.zeros((3, 4)))
        v = nce_loss(z, np.array([True, False, False]), None, Tensor(np.zeros(4)))
        assert float(v.data) == pytest.approx(math.log(3))

    def test_clips_without_positives_skipped(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((2, 4, 3))
        q = rng.standard_normal((2, 3))
        pos = np.array([[True, False, False, False], [False] * 4])
        both = float(nce_loss(Tensor(z), pos, None, Tensor(q)).data)
        alone = float(nce_loss(Tensor(z[0]), pos[0], None, Tensor(q[0])).data)
        assert both == pytest.approx(alone, rel=1e-12)

    def test_invalid_points_excluded(self):
        z = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]))
        v = nce_loss(z, np.array([True, False, False]), np.array([True, True, False]),
                     Tensor(np.array([1.0, 1.0])))
        assert float(v.data) == pytest.approx(math.log(2), abs=1e-9)


class TestTotal:
    def test_unit_weights(self):
        v = total_loss(Tensor(np.array(0.1)), Tensor(np.array(0.2)), Tensor(np.array(0.3)))
        assert float(v.data) == pytest.approx(0.6)

    def test_no_positives_is_focal_only(self):
        logits = Tensor(np.array([-1.0, 0.5, 2.0]))
        labels = np.zeros(3)
        cls = focal_loss(logits, labels)
        reg = diou_loss(Tensor(np.zeros((0, 2))), np.zeros((0, 2)))
        nce = nce_loss(Tensor(np.ones((3, 2))), labels.astype(bool), None, Tensor(np.ones(2)))
        assert float(total_loss(cls, reg, nce).data) == float(cls.data)
