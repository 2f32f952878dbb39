import itertools

import numpy as np
import pytest

from consdet.evaluation import IOU_THRESHOLDS, EvalResult, default_size_ranges, evaluate, format_table, match_class, pr_curve
from consdet.geometry import Box, iou
from consdet.inference import Detection

G1, G2 = Box(0, 0, 10, 10), Box(20, 20, 30, 30)


def det(box, score, cls=1):
    return Detection(Box(*box), cls, score)


def envelope_ap(points):
    """Independent 101-point interpolation from (recall, precision) pairs."""
    total = 0.0
    for k in range(101):
        r = k / 100
        total += max((p for rr, p in points if rr >= r - 1e-15), default=0.0)
    return total / 101


class TestHandCases:
    def test_perfect_single(self):
        res = evaluate([[det(G1, 0.3)]], [[(G1, 1)]])
        assert res.ap == 1.0 and all(v == 1.0 for v in res.ap_at.values())
        assert pr_curve([[det(G1, 0.3)]], [[(G1, 1)]], 1, 0.5) == [(1.0, 1.0)]

    def test_no_detections(self):
        res = evaluate([[]], [[(G1, 1)]])
        assert res.ap == 0.0
        assert res.counts[0.5] == {"tp": 0, "fp": 0, "fn": 1}

    def test_all_false_positives(self):
        dets = [[det((50, 50, 60, 60), 0.9), det((40, 40, 45, 45), 0.5)]]
        curve = pr_curve(dets, [[(G1, 1)]], 1, 0.5)
        assert all(p == 0.0 for _, p in curve)
        assert evaluate(dets, [[(G1, 1)]]).ap == 0.0

    def test_two_gts_three_dets_with_duplicate(self):
        dets = [[det(G1, 0.9), det(G1, 0.8), det(G2, 0.7)]]
        # TP, FP (duplicate), TP: recall .5 .5 1, precision 1 .5 2/3
        expected = (51 * 1.0 + 50 * (2 / 3)) / 101
        res = evaluate(dets, [[(G1, 1), (G2, 1)]])
        assert res.ap_at[0.5] == pytest.approx(expected, abs=1e-9)
        assert pr_curve(dets, [[(G1, 1), (G2, 1)]], 1, 0.5) == pytest.approx([(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)])

    def test_threshold_dependence(self):
        # IoU with G1 is 0.75: a hit up to 0.75, a miss above
        dets = [[det((0, 0, 10, 7.5), 0.9)]]
        res = evaluate(dets, [[(G1, 1)]])
        for t in IOU_THRESHOLDS:
            assert res.ap_at[t] == (1.0 if t <= 0.75 else 0.0)
        assert res.ap == pytest.approx(6 / 10, abs=1e-12)

    def test_low_score_hit_after_miss(self):
        dets = [[det((50, 50, 60, 60), 0.9), det(G1, 0.2)]]
        # FP then TP: recall 0, 1; precision 0, .5 -> envelope .5 everywhere
        assert evaluate(dets, [[(G1, 1)]]).ap_at[0.5] == pytest.approx(0.5, abs=1e-9)

    def test_mean_over_thresholds_is_exact(self):
        rng = np.random.default_rng(0)
        dets, gts = random_case(rng, 6)
        res = evaluate(dets, gts)
        assert res.ap == float(np.mean([res.ap_at[t] for t in IOU_THRESHOLDS]))
        assert 0.0 <= res.ap <= 1.0

    def test_unknown_class(self):
        with pytest.raises(ValueError):
            evaluate([[det(G1, 0.5, cls=3)]], [[(G1, 1)]], num_classes=2)

    def test_ties_by_image_then_order(self):
        dets = {0: [det((50, 50, 60, 60), 0.5)], 1: [det(G1, 0.5)]}
        gts = {0: [], 1: [(G1, 1)]}
        tp, fp, _, matches = match_class(dets, gts, 1, 0.5)
        assert [m[0] for m in matches] == [0, 1]
        assert tp.tolist() == [0, 1]


def random_case(rng, n_images, max_items=4):
    dets, gts = [], []
    for _ in range(n_images):
        g = []
        for _ in range(rng.integers(1, max_items + 1)):
            x, y = rng.uniform(0, 30, 2)
            g.append((Box(x, y, x + rng.uniform(5, 15), y + rng.uniform(5, 15)), int(rng.integers(1, 3))))
        d = []
        for _ in range(rng.integers(0, max_items + 1)):
            b, c = g[rng.integers(len(g))]
            jitter = rng.normal(0, 2, 4)
            box = Box(b.x1 + jitter[0], b.y1 + jitter[1], b.x2 + abs(jitter[2]) + 1, b.y2 + abs(jitter[3]) + 1)
            d.append(Detection(box, c, float(rng.random())))
        dets.append(d)
        gts.append(g)
    return dets, gts


class TestProperties:
    @pytest.mark.parametrize("seed", range(20))
    def test_pr_curve_integral_matches_evaluate(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_case(rng, 5)
        dets = [[Detection(d.box, 1, d.score) for d in ds] for ds in dets]
        gts = [[(b, 1) for b, _ in g] for g in gts]
        res = evaluate(dets, gts)
        for t in (0.5, 0.75):
            assert res.ap_at[t] == pytest.approx(envelope_ap(pr_curve(dets, gts, 1, t)), abs=1e-12)

    @pytest.mark.parametrize("seed", range(30))
    def test_greedy_never_beats_optimal_matching(self, seed):
        rng = np.random.default_rng(100 + seed)
        dets, gts = random_case(rng, 1)
        dets = [[Detection(d.box, 1, d.score) for d in dets[0]]]
        gts = [[(b, 1) for b, _ in gts[0]]]
        tp, _, _, _ = match_class(dets, gts, 1, 0.5)
        d, g = dets[0], gts[0]
        best = 0
        # every injective map from detections to gts-or-nothing
        slots = list(range(len(g))) + [None] * len(d)
        for perm in itertools.permutations(slots, len(d)):
            best = max(best, sum(j is not None and iou(d[i].box, g[j][0]) >= 0.5 for i, j in enumerate(perm)))
        assert int(tp.sum()) <= best

    @pytest.mark.parametrize("seed", range(10))
    def test_order_invariance(self, seed):
        rng = np.random.default_rng(200 + seed)
        dets, gts = random_case(rng, 4)
        shuffled = [list(np.array(ds, dtype=object)[rng.permutation(len(ds))]) if ds else [] for ds in dets]
        a, b = evaluate(dets, gts, 2), evaluate(shuffled, gts, 2)
        assert a.ap == b.ap and a.ap_at == b.ap_at

    @pytest.mark.parametrize("seed", range(10))
    def test_low_score_append_keeps_prefix_matches(self, seed):
        rng = np.random.default_rng(300 + seed)
        dets, gts = random_case(rng, 3)
        dets = [[Detection(d.box, 1, 0.5 + d.score / 2) for d in ds] for ds in dets]
        gts = [[(b, 1) for b, _ in g] for g in gts]
        _, _, _, before = match_class(dets, gts, 1, 0.5)
        extra = [list(ds) for ds in dets]
        extra[0].append(Detection(gts[0][0][0], 1, 0.1))
        _, _, _, after = match_class(extra, gts, 1, 0.5)
        assert after[: len(before)] == before


def test_size_strata_and_outputs():
    ranges = default_size_ranges(64)
    assert ranges["S"][1] == 256 and ranges["M"] == (256, 1024)
    dets = [[det(G1, 0.9), det((0, 0, 40, 40), 0.8)]]
    gts = [[(G1, 1), (Box(0, 0, 40, 40), 1)]]
    res = evaluate(dets, gts, size_ranges=ranges)
    assert res.ap_by_size["S"] == 1.0 and res.ap_by_size["L"] == 1.0
    assert np.isnan(res.ap_by_size["M"])
    csv_text = res.to_csv()
    assert csv_text.startswith("metric,value\nAP,1.000000\nAP50,1.000000")
    table = format_table([("x", res)])
    assert "AP50" in table and "100.0" in table
    assert isinstance(res, EvalResult)
