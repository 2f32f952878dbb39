import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consdet import tensor as T
from consdet.anchors import AnchorConfig, generate_anchors
from consdet.detector import DetectorOutputs
from consdet.geometry import Box, encode_array, iou
from consdet.inference import (
    Detection,
    InferenceConfig,
    decode_detections,
    decoded_boxes,
    nms,
    read_detections_csv,
    write_detections_csv,
)

ANCHORS = generate_anchors(AnchorConfig(), 64, 64)
A = len(ANCHORS)


def outputs(logits, t0, t1=None):
    return DetectorOutputs(T.Tensor(logits), T.Tensor(t0), None if t1 is None else T.Tensor(t1))


def reference_nms(dets, thr):
    """Exhaustive: walk every class by descending score, keep a box unless
    some already-kept same-class box overlaps it by more than ``thr``."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        if all(dets[j].class_id != dets[i].class_id or iou(dets[i].box, dets[j].box) <= thr for j in kept):
            kept.append(i)
    return set(kept)


def random_dets(rng, n):
    out = []
    for _ in range(n):
        x, y = rng.uniform(0, 50, 2)
        w, h = rng.uniform(2, 20, 2)
        # coarse scores create ties; coarse coordinates create duplicates
        score = float(rng.integers(1, 20)) / 20
        out.append(Detection(Box(round(x), round(y), round(x) + round(w) + 1, round(y) + round(h) + 1),
                             int(rng.integers(1, 3)), score))
    return out


class TestDecode:
    def test_zero_offsets_give_anchors(self):
        out = outputs(np.zeros((A, 2)), np.zeros((A, 4)), np.zeros((A, 4)))
        for second in (False, True):
            np.testing.assert_array_equal(decoded_boxes(out, ANCHORS, second), ANCHORS.boxes)

    def test_flag_off_ignores_stage2(self):
        rng = np.random.default_rng(0)
        t0 = rng.normal(0, 0.2, (A, 4))
        a = decoded_boxes(outputs(np.zeros((A, 2)), t0, rng.normal(size=(A, 4))), ANCHORS, False)
        b = decoded_boxes(outputs(np.zeros((A, 2)), t0), ANCHORS, False)
        np.testing.assert_array_equal(a, b)

    def test_two_step_composition(self):
        rng = np.random.default_rng(1)
        g = ANCHORS.boxes + rng.uniform(-3, 3, (A, 4))
        g2 = g + rng.uniform(-3, 3, (A, 4))
        out = outputs(np.zeros((A, 2)), encode_array(ANCHORS.boxes, g), encode_array(g, g2))
        np.testing.assert_allclose(decoded_boxes(out, ANCHORS, True), g2, atol=1e-9)

    def test_missing_stage2_head(self):
        with pytest.raises(ValueError):
            decoded_boxes(outputs(np.zeros((A, 2)), np.zeros((A, 4))), ANCHORS, True)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            decode_detections(outputs(np.zeros((A - 1, 2)), np.zeros((A, 4))), ANCHORS, InferenceConfig(), 64, 64)

    def test_detections_are_clipped_scored_and_monotone(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(-2, 2, (A, 2))
        out = outputs(logits, rng.normal(0, 0.3, (A, 4)), rng.normal(0, 0.3, (A, 4)))
        prev = None
        for thr in (0.05, 0.2, 0.5, 0.9):
            dets = decode_detections(out, ANCHORS, InferenceConfig(score_threshold=thr), 64, 64)
            keys = {(d.anchor_index, d.class_id) for d in dets}
            for d in dets:
                x1, y1, x2, y2 = d.box
                assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
                assert d.score >= thr
                assert d.score == pytest.approx(1 / (1 + np.exp(-logits[d.anchor_index, d.class_id - 1])), rel=1e-14)
            if prev is not None:
                assert keys <= prev
            prev = keys

    def test_topk(self):
        out = outputs(np.random.default_rng(3).normal(0, 1, (A, 2)), np.zeros((A, 4)))
        dets = decode_detections(out, ANCHORS, InferenceConfig(False, score_threshold=0.0, pre_nms_topk=7), 64, 64)
        assert len(dets) <= 7


class TestNMS:
    def test_single(self):
        d = Detection(Box(0, 0, 5, 5), 1, 0.5)
        assert nms([d], 0.5) == [d]

    def test_identical_pair(self):
        a, b = Detection(Box(0, 0, 5, 5), 1, 0.8), Detection(Box(0, 0, 5, 5), 1, 0.9)
        assert nms([a, b], 0.5) == [b]

    def test_other_class_not_suppressed(self):
        a, b = Detection(Box(0, 0, 5, 5), 1, 0.8), Detection(Box(0, 0, 5, 5), 2, 0.9)
        assert nms([a, b], 0.5) == [b, a]

    def test_threshold_one_keeps_all(self):
        dets = random_dets(np.random.default_rng(4), 40)
        assert len(nms(dets, 1.0)) == 40

    def test_strict_inequality(self):
        a = Detection(Box(0, 0, 10, 10), 1, 0.9)
        b = Detection(Box(0, 0, 5, 10), 1, 0.8)  # IoU exactly 0.5
        assert len(nms([a, b], 0.5)) == 2
        assert len(nms([a, b], 0.49)) == 1

    @pytest.mark.parametrize("thr", [0.0, 0.3, 0.5, 0.7])
    def test_matches_reference(self, thr):
        rng = np.random.default_rng(int(thr * 10))
        for _ in range(100):
            dets = random_dets(rng, int(rng.integers(0, 51)))
            got = nms(dets, thr)
            assert {id(d) for d in got} == {id(dets[i]) for i in reference_nms(dets, thr)}

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 1))
    def test_invariants(self, seed, thr):
        dets = random_dets(np.random.default_rng(seed), 30)
        kept = nms(dets, thr, max_detections=10)
        assert len(kept) <= 10
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                assert a.class_id != b.class_id or iou(a.box, b.box) <= thr

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            nms([], 1.5)


def test_csv_round_trip(tmp_path):
    dets = {3: [Detection(Box(1.25, 2.5, 10.125, 20.0), 2, 0.875)], 1: []}
    write_detections_csv(tmp_path / "d.csv", dets)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines == ["image_id,class_id,score,x1,y1,x2,y2", "3,2,0.875000,1.250000,2.500000,10.125000,20.000000"]
    back = read_detections_csv(tmp_path / "d.csv")
    assert back[3][0].box == dets[3][0].box and back[3][0].score == 0.875
