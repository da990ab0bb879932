import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradkd.detector import Detection, GroundTruth
from gradkd.metrics import iou, map50, mask_similarity, pr_curves

from oracles import exhaustive_ap, random_micro_case


class TestIou:
    def test_half_overlap(self):
        # 2x2 boxes sharing a 1x2 strip: 2 / (4 + 4 - 2)
        assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)

    def test_corner_overlap(self):
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_identical_and_disjoint(self):
        assert iou((1, 2, 5, 7), (1, 2, 5, 7)) == pytest.approx(1.0)
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
        assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 50), min_size=8, max_size=8))
    def test_symmetric_and_bounded(self, v):
        a = (min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 1, max(v[2], v[3]) + 1)
        b = (min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 1, max(v[6], v[7]) + 1)
        assert iou(a, b) == pytest.approx(iou(b, a))
        assert 0.0 <= iou(a, b) <= 1.0 + 1e-12


class TestMap:
    gts = [[GroundTruth((0, 0, 10, 10), 0), GroundTruth((20, 20, 30, 30), 1)], [GroundTruth((5, 5, 15, 15), 0)]]

    def test_perfect(self):
        dets = [[Detection(g.box, g.class_id, 0.9) for g in img] for img in self.gts]
        aps, m = map50(dets, self.gts)
        assert m == pytest.approx(1.0) and set(aps) == {0, 1}

    def test_no_detections(self):
        assert map50([[], []], self.gts)[1] == 0.0

    def test_wrong_class_is_false_positive(self):
        dets = [[Detection((0, 0, 10, 10), 1, 0.9)], []]
        assert map50(dets, self.gts)[1] == 0.0

    def test_duplicate_detection(self):
        # second copy of the same box is a false positive ranked below the hit
        dets = [[Detection((0, 0, 10, 10), 0, 0.9), Detection((0, 0, 10, 10), 0, 0.8)], []]
        curve = pr_curves(dets, self.gts)[0]
        np.testing.assert_allclose(curve.recall, [0.5, 0.5])
        np.testing.assert_allclose(curve.precision, [1.0, 0.5])
        assert curve.average_precision() == pytest.approx(0.5)

    def test_precision_envelope(self):
        # FP first then TP: precision at recall 0.5 is max(1/2) over later ranks
        dets = [[Detection((40, 40, 50, 50), 0, 0.9), Detection((0, 0, 10, 10), 0, 0.5)], []]
        assert pr_curves(dets, self.gts)[0].average_precision() == pytest.approx(0.25)

    def test_iou_threshold_inclusive(self):
        gts = [[GroundTruth((0, 0, 2, 2), 0)]]
        # IoU exactly 0.5: 2x2 gt vs 2x1 detection inside it
        assert map50([[Detection((0, 0, 2, 1), 0, 1.0)]], gts)[1] == pytest.approx(1.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            map50([[]], self.gts)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            dets, gts = random_micro_case(rng)
            aps, _ = map50(dets, gts)
            for c, ap in aps.items():
                assert ap == pytest.approx(exhaustive_ap(dets, gts, c), abs=1e-12)

    def test_rescaled_scores_invariant(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            dets, gts = random_micro_case(rng)
            scaled = [[Detection(d.box, d.class_id, 0.1 + 0.5 * d.score ** 2) for d in img] for img in dets]
            assert map50(dets, gts)[1] == pytest.approx(map50(scaled, gts)[1], abs=1e-12)

    def test_rows_accepted(self):
        dets = [np.array([[0, 0, 10, 10, 0, 0.9]]), np.zeros((0, 6))]
        gts = [np.array([[0, 0, 10, 10, 0]]), np.zeros((0, 5))]
        assert map50(dets, gts)[1] == pytest.approx(1.0)


class TestMaskSimilarity:
    def test_examples(self):
        assert mask_similarity(np.ones((2, 2)), np.ones((2, 2))) == 1.0
        assert mask_similarity(np.ones((2, 2)), np.zeros((2, 2))) == 0.0
        assert mask_similarity([[0.0, 0.5]], [[0.5, 0.5]]) == pytest.approx(0.75)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_similarity(np.ones((2, 2)), np.ones((2, 3)))
