import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s6tal.heads import ActionSegment
from s6tal.metrics import (PRESETS, ap_from_tp, average_precision, mean_ap, nms, resolve_thresholds,
                           tiou, tiou_matrix)

S = ActionSegment


def brute_force_ap(preds, gts, thr):
    """Independent exact evaluator over rational arithmetic.

    Walks predictions by descending score, matching each to the unmatched
    ground truth of highest overlap at or above ``thr``; then takes, for each
    recall level reached, the best precision at that recall or beyond.
    """
    def overlap(a, b):
        lo, hi = max(a[0], b[0]), min(a[1], b[1])
        inter = max(Fraction(0), hi - lo)
        union = (a[1] - a[0]) + (b[1] - b[0]) - inter
        return inter / union if union else Fraction(0)

    thr = Fraction(thr).limit_denominator(1000)
    used = set()
    points = []  # (recall, precision) after each prediction
    hits = 0
    for n, (vid, p) in enumerate(sorted(preds, key=lambda t: -t[1].score), start=1):
        cands = [(overlap((Fraction(p.start), Fraction(p.end)), (Fraction(g.start), Fraction(g.end))), j)
                 for j, (gv, g) in enumerate(gts) if gv == vid and j not in used]
        cands = [c for c in cands if c[0] >= thr]
        if cands:
            best = max(cands, key=lambda c: (c[0], -c[1]))
            used.add(best[1])
            hits += 1
        points.append((Fraction(hits, len(gts)), Fraction(hits, n)))
    ap = Fraction(0)
    prev = Fraction(0)
    for r in sorted({r for r, _ in points}):
        if r == 0:
            continue
        ap += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return ap


class TestTiou:
    def test_identical(self):
        assert tiou((2.0, 7.0), (2.0, 7.0)) == 1.0

    def test_partial(self):
        assert tiou((0.0, 10.0), (5.0, 15.0)) == pytest.approx(1 / 3)

    def test_disjoint(self):
        assert tiou((0.0, 1.0), (2.0, 3.0)) == 0.0

    def test_zero_union(self):
        assert tiou((1.0, 1.0), (1.0, 1.0)) == 0.0

    def test_inverted(self):
        with pytest.raises(ValueError):
            tiou((3.0, 1.0), (0.0, 1.0))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 10)), min_size=1, max_size=4),
           st.lists(st.tuples(st.floats(0, 50), st.floats(0, 10)), min_size=1, max_size=4))
    def test_matrix_matches_scalar_and_range(self, a, b):
        pa = np.array([(s, s + d) for s, d in a])
        pb = np.array([(s, s + d) for s, d in b])
        m = tiou_matrix(pa, pb)
        for i, j in itertools.product(range(len(pa)), range(len(pb))):
            assert m[i, j] == pytest.approx(tiou(tuple(pa[i]), tuple(pb[j])), abs=1e-12)
            assert 0.0 <= m[i, j] <= 1.0 + 1e-12
            assert m[i, j] == pytest.approx(tiou(tuple(pb[j]), tuple(pa[i])), abs=1e-12)


class TestNMS:
    def test_overlapping_pair(self):
        kept = nms([S(0, 10, 0, 0.9), S(1, 11, 0, 0.8)], 0.5)
        assert kept == [S(0, 10, 0, 0.9)]
        assert tiou((0, 10), (1, 11)) == pytest.approx(9 / 11)

    def test_disjoint_all_kept(self):
        segs = [S(0, 1, 0, 0.5), S(2, 3, 0, 0.9), S(4, 5, 0, 0.7)]
        assert len(nms(segs, 0.1)) == 3

    def test_single(self):
        assert nms([S(0, 1, 0, 0.3)], 0.5) == [S(0, 1, 0, 0.3)]

    def test_class_aware(self):
        segs = [S(0, 10, 0, 0.9), S(0, 10, 1, 0.8)]
        assert len(nms(segs, 0.5, class_aware=True)) == 2
        assert len(nms(segs, 0.5, class_aware=False)) == 1

    def test_max_keep(self):
        segs = [S(i, i + 1, 0, 1 - i / 10) for i in range(0, 10, 2)]
        assert len(nms(segs, 0.5, max_keep=2)) == 2

    def test_tie_break(self):
        segs = [S(1, 11, 1, 0.5), S(0, 10, 1, 0.5), S(0, 10, 0, 0.5)]
        assert nms(segs, 0.5, class_aware=False) == [S(0, 10, 0, 0.5)]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(1, 8), st.integers(0, 2), st.sampled_from([.2, .5, .9])),
                    min_size=1, max_size=8), st.randoms())
    def test_order_independent(self, raw, rnd):
        segs = [S(float(s), float(s + d), k, c) for s, d, k, c in raw]
        shuffled = list(segs)
        rnd.shuffle(shuffled)
        assert nms(segs, 0.4) == nms(shuffled, 0.4)
        assert nms(segs, 0.4, class_aware=False) == nms(shuffled, 0.4, class_aware=False)


class TestAveragePrecision:
    def test_exact_prediction(self):
        for thr in PRESETS["thumos"] + PRESETS["activitynet"]:
            assert average_precision([("v", S(1, 5, 0, 0.7))], [("v", S(1, 5, 0))], thr) == 1.0

    def test_fp_then_tp(self):
        preds = [("v", S(20, 30, 0, 0.9)), ("v", S(1, 5, 0, 0.8))]
        assert average_precision(preds, [("v", S(1, 5, 0))], 0.5) == pytest.approx(0.5)

    def test_no_predictions(self):
        assert average_precision([], [("v", S(1, 5, 0))], 0.5) == 0.0

    def test_needs_gt(self):
        with pytest.raises(ValueError):
            average_precision([], [], 0.5)

    def test_other_video_does_not_match(self):
        assert average_precision([("w", S(1, 5, 0, 0.9))], [("v", S(1, 5, 0))], 0.5) == 0.0

    def test_duplicate_is_false_positive(self):
        preds = [("v", S(1, 5, 0, 0.9)), ("v", S(1, 5, 0, 0.8))]
        assert average_precision(preds, [("v", S(1, 5, 0)), ("v", S(10, 12, 0))], 0.5) == pytest.approx(0.5)

    def test_envelope(self):
        # TP, FP, TP over two GTs: precision 1, 1/2, 2/3 -> envelope 1 then 2/3
        assert ap_from_tp(np.array([1, 0, 1]), 2) == pytest.approx(0.5 + 0.5 * 2 / 3)


def _case(data):
    n_gt = data.draw(st.integers(1, 3))
    n_pred = data.draw(st.integers(0, 5))
    vids = ["a", "b"]
    gts = [(data.draw(st.sampled_from(vids)), S(float(s), float(s + d), 0))
           for s, d in data.draw(st.lists(st.tuples(st.integers(0, 20), st.integers(1, 8)),
                                          min_size=n_gt, max_size=n_gt))]
    scores = data.draw(st.lists(st.integers(1, 1000), min_size=n_pred, max_size=n_pred, unique=True))
    preds = [(data.draw(st.sampled_from(vids)),
              S(float(s), float(s + d), 0, sc / 1000))
             for (s, d), sc in zip(data.draw(st.lists(st.tuples(st.integers(0, 22), st.integers(1, 9)),
                                                      min_size=n_pred, max_size=n_pred)), scores)]
    return preds, gts


@settings(max_examples=300, deadline=None)
@given(st.data(), st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.95]))
def test_ap_matches_brute_force(data, thr):
    preds, gts = _case(data)
    assert average_precision(preds, gts, thr) == pytest.approx(float(brute_force_ap(preds, gts, thr)), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_ap_invariant_to_monotone_rescaling(data):
    preds, gts = _case(data)
    rescaled = [(v, S(p.start, p.end, p.label, float(np.exp(3 * p.score) - 0.5))) for v, p in preds]
    for thr in (0.3, 0.5, 0.7):
        assert average_precision(preds, gts, thr) == average_precision(rescaled, gts, thr)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_ap_monotone_in_threshold(data):
    preds, gts = _case(data)
    aps = [average_precision(preds, gts, t) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


class TestMeanAP:
    def test_two_perfect_classes(self):
        gts = {"v": [S(0, 5, 0), S(10, 15, 1)]}
        preds = {"v": [S(0, 5, 0, 0.9), S(10, 15, 1, 0.8)]}
        r = mean_ap(preds, gts)
        assert r.mAP == [1.0] * 5 and r.average_mAP == 1.0

    def test_one_perfect_one_missed(self):
        gts = {"v": [S(0, 5, 0), S(10, 15, 1)]}
        r = mean_ap({"v": [S(0, 5, 0, 0.9)]}, gts)
        assert r.mAP == [0.5] * 5

    def test_class_without_gt_excluded(self):
        gts = {"v": [S(0, 5, 0)]}
        preds = {"v": [S(0, 5, 0, 0.9), S(20, 25, 2, 0.8)]}
        r = mean_ap(preds, gts, class_names=["a", "b", "c"])
        assert r.mAP == [1.0] * 5
        assert set(r.ap) == {"a"}

    def test_empty_gt(self):
        with pytest.raises(ValueError):
            mean_ap({}, {"v": []})

    def test_average_is_mean_of_row(self):
        gts = {"v": [S(0, 10, 0)]}
        r = mean_ap({"v": [S(0, 6, 0, 0.9)]}, gts)  # tIoU 0.6
        assert r.mAP == [1.0, 1.0, 1.0, 1.0, 0.0]
        assert r.average_mAP == pytest.approx(0.8)
        assert r.row()[-1] == r.average_mAP

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(0)
        gts = {f"v{i}": [S(float(s), float(s) + 5, int(k)) for s, k in zip(rng.uniform(0, 50, 3),
                                                                           rng.integers(0, 3, 3))]
               for i in range(4)}
        preds = {v: [S(g.start + d, g.end + d, g.label, float(c))
                     for g, d, c in zip(segs, rng.normal(0, 2, 3), rng.uniform(size=3))] for v, segs in gts.items()}
        r = mean_ap(preds, gts, "activitynet")
        assert all(0.0 <= v <= 1.0 for v in r.row())
        assert all(0.0 <= v <= 1.0 for vals in r.ap.values() for v in vals)


class TestPresets:
    def test_thumos_columns(self):
        r = mean_ap({"v": []}, {"v": [S(0, 1, 0)]}, "thumos")
        assert r.columns() == ["@0.3", "@0.4", "@0.5", "@0.6", "@0.7", "Avg"]

    def test_activitynet_columns(self):
        r = mean_ap({"v": []}, {"v": [S(0, 1, 0)]}, "activitynet")
        assert r.columns() == ["@0.5", "@0.75", "@0.95", "Avg"]

    def test_explicit_list(self):
        assert resolve_thresholds([0.2, 0.4]) == (0.2, 0.4)

    @pytest.mark.parametrize("bad", ["coco", [], [0.0], [1.5]])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            resolve_thresholds(bad)

    def test_report_outputs(self):
        r = mean_ap({"v": [S(0, 1, 0, 0.5)]}, {"v": [S(0, 1, 0)]}, "activitynet", class_names=["walk"])
        d = r.to_dict()
        assert d["columns"] == r.columns() and d["mAP"]["Avg"] == 1.0
        table = r.table()
        assert "Avg" in table and "walk" in table and "100.0" in table
        assert json.loads(r.to_json()) == d
