import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gradkd.bmfi import bmfi_loss, box_mask, channel_attention, spatial_attention, surround_weight
from gradkd.detector import GroundTruth
from gradkd.gradcheck import check_gradient
from gradkd.tensor import ShapeError, Tensor


def gt(x0, y0, x1, y1, c=0):
    return GroundTruth((x0, y0, x1, y1), c)


class TestBoxMask:
    def test_centre_cell_is_one(self):
        assert box_mask([gt(4, 4, 12, 12)], (16, 16), 1)[8, 8] == 1.0

    def test_far_cell_is_zero(self):
        m = box_mask([gt(4, 4, 12, 12)], (32, 32), 1)
        assert m[30, 30] == 0.0 and m[0, 25] == 0.0

    def test_surrounding_value(self):
        # box centred at (8, 8), 8 x 8; cell (14, 8) sits at (14.5, 8.5)
        m = box_mask([gt(4.5, 4.5, 12.5, 12.5)], (20, 20), 1)
        assert m[8, 14] == pytest.approx(math.exp(-0.28125), abs=1e-15)
        assert m[8, 14] == pytest.approx(0.7548, abs=1e-4)

    def test_stride_scaling(self):
        a = box_mask([gt(8, 8, 24, 24)], (8, 8), 4)
        b = box_mask([gt(2, 2, 6, 6)], (8, 8), 1)
        np.testing.assert_array_equal(a, b)

    def test_overlap_takes_max(self):
        g1, g2 = gt(2, 2, 8, 8), gt(6, 6, 14, 14)
        both = box_mask([g1, g2], (16, 16), 1)
        np.testing.assert_array_equal(both, np.maximum(box_mask([g1], (16, 16), 1), box_mask([g2], (16, 16), 1)))

    def test_sub_cell_box(self):
        # the centre cell stands in for the box, which is widened to one cell
        m = box_mask([gt(16.5, 16.5, 17.5, 17.5)], (4, 4), 8)
        assert m[2, 2] == 1.0 and np.count_nonzero(m == 1.0) == 1
        # centre 2.125 in cell units; cell (1, 2) has u = 0.375, v = 0.625
        assert m[1, 2] == pytest.approx(math.exp(-0.5), rel=1e-12)

    def test_no_boxes(self):
        assert not box_mask([], (4, 4), 8).any()

    def test_surround_weight(self):
        assert surround_weight(0.75, 0.0) == pytest.approx(math.exp(-0.28125))


class TestAttention:
    def test_uniform_spatial(self):
        np.testing.assert_allclose(spatial_attention(Tensor(np.ones((3, 2, 2))), 0.5).data, 1.0, rtol=1e-15)

    def test_uniform_channel(self):
        np.testing.assert_allclose(channel_attention(Tensor(np.full((4, 3, 3), -2.0)), 0.5).data, 1.0)

    def test_hot_cell_sharper_at_low_temperature(self):
        f = np.zeros((2, 3, 3))
        f[:, 1, 1] = 1.0
        assert spatial_attention(Tensor(f), 0.25).data[1, 1] > spatial_attention(Tensor(f), 1.0).data[1, 1]

    def test_louder_channel_wins(self):
        f = np.ones((3, 2, 2))
        f[1] *= 2
        c = channel_attention(Tensor(f), 0.5).data
        assert c[1] > c[0] and c[0] == c[2]

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_bad_temperature(self, t):
        with pytest.raises(ValueError):
            spatial_attention(Tensor(np.ones((1, 2, 2))), t)
        with pytest.raises(ValueError):
            channel_attention(Tensor(np.ones((1, 2, 2))), t)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (2, 3, 4, 5), elements=st.floats(-20, 20, width=64)), st.floats(0.05, 5))
    def test_sums(self, f, t):
        s = spatial_attention(Tensor(f), t).data
        c = channel_attention(Tensor(f), t).data
        np.testing.assert_allclose(s.sum(axis=(-2, -1)), 20.0, atol=1e-9)
        np.testing.assert_allclose(c.sum(axis=-1), 3.0, atol=1e-9)

    def test_high_temperature_limit(self, rng):
        f = Tensor(rng.uniform(-1, 1, size=(5, 6, 6)))
        assert np.abs(spatial_attention(f, 1e3).data - 1).max() < 1e-3
        assert np.abs(channel_attention(f, 1e3).data - 1).max() < 1e-3


class TestBmfiLoss:
    def test_identical_features(self, rng):
        f = [rng.normal(size=(2, 3, 4, 4))]
        assert bmfi_loss(f, [Tensor(f[0])], [np.ones((2, 4, 4))]).item() == 0.0

    def test_zero_mask_identical_attention(self, rng):
        ft = rng.normal(size=(1, 3, 4, 4))
        fs = -ft  # same |A|, so both attentions agree
        assert bmfi_loss([ft], [Tensor(fs)], [np.zeros((1, 4, 4))]).item() == 0.0

    def test_single_cell(self):
        loss = bmfi_loss([np.full((1, 1, 1, 1), 2.0)], [Tensor(np.zeros((1, 1, 1, 1)))],
                         [np.ones((1, 1, 1))], alpha=0.0)
        assert loss.item() == 4.0

    def test_parts(self, rng):
        ft, fs = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
        total, imit, att = bmfi_loss([ft], [Tensor(fs)], [np.ones((2, 4, 4))], alpha=0.5, return_parts=True)
        assert total.item() == pytest.approx(imit.item() + att.item(), rel=1e-14)
        s_t, s_s = spatial_attention(Tensor(ft), 0.5).data, spatial_attention(Tensor(fs), 0.5).data
        c_t, c_s = channel_attention(Tensor(ft), 0.5).data, channel_attention(Tensor(fs), 0.5).data
        expect_att = 0.5 * (np.abs(s_t - s_s).sum() + np.abs(c_t - c_s).sum()) / 2
        expect_imit = (s_t[:, None] * c_t[:, :, None, None] * (ft - fs) ** 2).sum() / 2
        assert att.item() == pytest.approx(expect_att, rel=1e-12)
        assert imit.item() == pytest.approx(expect_imit, rel=1e-12)

    def test_without_attention_is_masked_sse(self, rng):
        ft, fs, m = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3)), rng.uniform(size=(1, 3, 3))
        loss = bmfi_loss([ft], [Tensor(fs)], [m], use_attention=False)
        assert loss.item() == pytest.approx((m[:, None] * (ft - fs) ** 2).sum(), rel=1e-12)

    def test_no_mask_means_ones(self, rng):
        ft, fs = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3))
        a = bmfi_loss([ft], [Tensor(fs)], None).item()
        b = bmfi_loss([ft], [Tensor(fs)], [np.ones((1, 3, 3))]).item()
        assert a == b

    def test_teacher_gets_no_gradient(self, rng):
        from gradkd.tensor import Tape
        ft = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        fs = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = bmfi_loss([ft], [fs], None)
        g = tape.backward(loss)
        assert ft not in g and fs in g

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            bmfi_loss([np.zeros((1, 2, 3, 3))], [Tensor(np.zeros((1, 2, 3, 4)))], None)
        with pytest.raises(ShapeError):
            bmfi_loss([np.zeros((1, 2, 3, 3))], [Tensor(np.zeros((1, 2, 3, 3)))], [np.ones((2, 2))])

    def test_gradient_matches_fd(self, rng):
        ft = [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 2, 2))]
        masks = [rng.uniform(size=(2, 4, 4)), rng.uniform(size=(2, 2, 2))]
        err = check_gradient(lambda a, b: bmfi_loss(ft, [a, b], masks, alpha=0.8, temperature=0.7),
                             [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 2, 2))])
        assert err < 1e-4

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-3, 3, width=64)),
           arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-3, 3, width=64)))
    def test_non_negative(self, ft, fs):
        assert bmfi_loss([ft], [Tensor(fs)], [np.ones((1, 3, 3))]).item() >= 0
