import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consdet.geometry import (
    Box,
    Offsets,
    clip,
    clip_array,
    decode,
    decode_array,
    encode,
    encode_array,
    iou,
    iou_array,
)

side = st.floats(1.0, 512.0)
coord = st.floats(-1000.0, 1000.0)


@st.composite
def boxes(draw):
    x, y = draw(coord), draw(coord)
    return Box(x, y, x + draw(side), y + draw(side))


class TestIoU:
    def test_identity(self):
        assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0

    def test_hand_computed_overlap(self):
        # intersection 1, union 4 + 4 - 1
        assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)

    def test_touching_edges_do_not_overlap(self):
        assert iou(Box(0, 0, 1, 1), Box(1, 0, 2, 1)) == 0.0

    @pytest.mark.parametrize("bad", [Box(0, 0, 0, 5), Box(0, 0, 5, -1), Box(3, 3, 1, 4)])
    def test_degenerate_rejected(self, bad):
        with pytest.raises(ValueError):
            iou(bad, Box(0, 0, 1, 1))
        with pytest.raises(ValueError):
            iou_array([bad], [(0, 0, 1, 1)])

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(boxes(), boxes())
    def test_one_only_for_equal_boxes(self, a, b):
        assert iou(a, a) == 1.0
        # differences below double resolution of the area can round to 1.0
        if max(abs(u - v) for u, v in zip(a, b)) > 1e-9 * max(map(abs, a + b)):
            assert iou(a, b) < 1.0

    @given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
    def test_matrix_matches_scalar(self, a, b):
        m = iou_array(a, b)
        for i, x in enumerate(a):
            for j, y in enumerate(b):
                assert m[i, j] == iou(x, y)


class TestEncodeDecode:
    def test_identity_encodes_to_zero(self):
        assert encode(Box(3, 4, 10, 20), Box(3, 4, 10, 20)) == Offsets(0.0, 0.0, 0.0, 0.0)

    def test_hand_shift(self):
        assert encode(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx((0.5, 0, 0, 0))

    def test_hand_scale(self):
        t = encode(Box(0, 0, 10, 10), Box(0, 0, 20, 20))
        assert t == pytest.approx((0.5, 0.5, math.log(2), math.log(2)), abs=1e-15)

    def test_decode_zero_is_identity(self):
        a = Box(1.5, 2.5, 9.0, 30.0)
        assert decode(a, Offsets(0, 0, 0, 0)) == a

    def test_decode_hand_shift(self):
        assert decode(Box(0, 0, 10, 10), Offsets(0.5, 0, 0, 0)) == pytest.approx((5, 0, 15, 10))

    def test_decode_rejects_non_finite(self):
        with pytest.raises(ValueError):
            decode(Box(0, 0, 1, 1), Offsets(float("nan"), 0, 0, 0))
        with pytest.raises(ValueError):
            decode_array([(0, 0, 1, 1)], [(0, 0, float("inf"), 0)])

    def test_encode_rejects_degenerate(self):
        with pytest.raises(ValueError):
            encode(Box(0, 0, 0, 1), Box(0, 0, 1, 1))

    def test_clamp_keeps_boxes_finite(self):
        b = decode(Box(0, 0, 10, 10), Offsets(0, 0, 1e4, -1e4), max_log_scale=math.log(1000 / 16))
        assert all(math.isfinite(v) for v in b)
        assert b.width == pytest.approx(625.0) and b.height > 0

    @settings(max_examples=300)
    @given(boxes(), boxes())
    def test_round_trip(self, a, b):
        back = decode(a, encode(a, b))
        assert max(abs(u - v) for u, v in zip(back, b)) < 1e-9

    @given(boxes(), boxes(), st.floats(-300, 300), st.floats(-300, 300))
    def test_translation_invariance(self, a, b, dx, dy):
        shift = lambda r: Box(r.x1 + dx, r.y1 + dy, r.x2 + dx, r.y2 + dy)
        t1, t2 = encode(a, b), encode(shift(a), shift(b))
        assert t1 == pytest.approx(t2, rel=1e-6, abs=1e-6)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(3)
        xy = rng.uniform(-50, 50, size=(40, 2))
        wh = rng.uniform(1, 100, size=(40, 2))
        a = np.hstack([xy[:20], xy[:20] + wh[:20]])
        b = np.hstack([xy[20:], xy[20:] + wh[20:]])
        enc = encode_array(a, b)
        for i in range(20):
            assert tuple(enc[i]) == pytest.approx(encode(Box(*a[i]), Box(*b[i])), abs=1e-15)
        np.testing.assert_allclose(decode_array(a, enc), b, atol=1e-9)


class TestClip:
    def test_clamp_low(self):
        assert clip(Box(-5, -5, 5, 5), 64, 64) == Box(0, 0, 5, 5)

    def test_inside_unchanged(self):
        assert clip(Box(1, 2, 30, 40), 64, 64) == Box(1, 2, 30, 40)

    def test_clamp_high(self):
        assert clip(Box(60, 60, 80, 80), 64, 64) == Box(60, 60, 64, 64)

    def test_array_form(self):
        out = clip_array([(-5, -5, 5, 5), (60, 60, 80, 80)], 64, 64)
        np.testing.assert_array_equal(out, [[0, 0, 5, 5], [60, 60, 64, 64]])
