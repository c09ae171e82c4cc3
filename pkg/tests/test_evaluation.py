import csv
import json

import numpy as np
import pytest

from case_tal import evaluation as ev
from case_tal.errors import InputError
from case_tal.evaluation import GroundTruthSegment as GT
from case_tal.inference import Proposal, nms

from oracles import ap_oracle, auc_oracle, matching_oracle, small_instances


def P(vid, cls, s, e, score):
    return Proposal(vid, cls, s, e, score)


def test_tiou_examples():
    assert ev.tiou((0, 2), (0, 2)) == 1.0
    assert ev.tiou((0, 1), (2, 3)) == 0.0
    assert ev.tiou((0, 2), (1, 3)) == pytest.approx(1 / 3)


def test_ap_examples():
    gts = [GT("v", 0, 0, 2), GT("v", 0, 5, 7)]
    assert ev.average_precision([P("v", 0, 0, 2, 0.9), P("v", 0, 5, 7, 0.8)], gts, 0.5) == 1.0
    assert ev.average_precision([P("v", 0, 10, 12, 0.9)], gts, 0.5) == 0.0
    dets = [P("v", 0, 0, 2, 0.9), P("v", 0, 10, 11, 0.8), P("v", 0, 5, 7, 0.7)]
    assert ev.average_precision(dets, gts, 0.5) == pytest.approx((1 + 2 / 3) / 2)
    assert ev.average_precision(dets, gts, 0.5) == pytest.approx(0.8333, abs=1e-4)


def test_ap_without_ground_truth_warns(caplog):
    with caplog.at_level("WARNING"):
        assert ev.average_precision([P("v", 0, 0, 1, 1.0)], [], 0.5) == 0.0
    assert "without ground truth" in caplog.text


def test_duplicate_detection_is_false_positive():
    gts = [GT("v", 0, 0, 2)]
    dets = [P("v", 0, 0, 2, 0.9), P("v", 0, 0, 2, 0.8)]
    assert ev.match_detections(ev.sort_detections(dets), gts, 0.5).tolist() == [True, False]


def test_matching_respects_videos():
    gts = [GT("a", 0, 0, 2)]
    assert ev.average_precision([P("b", 0, 0, 2, 0.9)], gts, 0.5) == 0.0


def test_matching_and_ap_match_oracle():
    for dets, gts, th in small_instances(0, 400):
        ranked = ev.sort_detections(dets)
        assert ev.match_detections(ranked, gts, th).tolist() == matching_oracle(dets, gts, th)
        assert ev.average_precision(dets, gts, th) == pytest.approx(ap_oracle(dets, gts, th), abs=1e-12)


def test_ap_invariant_under_monotone_score_transform():
    for dets, gts, th in small_instances(1, 100):
        moved = [P(d.video_id, d.class_index, d.start_sec, d.end_sec, np.exp(3 * d.score) + 1)
                 for d in dets]
        assert ev.average_precision(moved, gts, th) == ev.average_precision(dets, gts, th)


def test_ap_non_increasing_in_threshold():
    for dets, gts, _ in small_instances(2, 100):
        aps = [ev.average_precision(dets, gts, t) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert all(b <= a + 1e-12 for a, b in zip(aps, aps[1:]))


def test_duplicates_removed_by_exact_nms_keep_map():
    for dets, gts, _ in small_instances(3, 60):
        dets = [d for d in dets if d.score > 0]
        doubled = dets + [P(d.video_id, d.class_index, d.start_sec, d.end_sec, d.score) for d in dets]
        cleaned = []
        for v in {d.video_id for d in doubled}:
            cleaned += nms([d for d in doubled if d.video_id == v], 1.0)
        a = ev.map_report(cleaned, gts, "thumos", num_classes=1).map
        b = ev.map_report(dets, gts, "thumos", num_classes=1).map
        assert np.allclose(a, b)


def test_ap_modes():
    assert ev.ap_from_flags([True, False, True], 2, "sum") == pytest.approx(5 / 6)
    assert ev.ap_from_flags([True, False, True], 2, "envelope") == pytest.approx(5 / 6)
    assert ev.ap_from_flags([False, True, True], 2, "sum") == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert ev.ap_from_flags([False, True, True], 2, "envelope") == pytest.approx(2 / 3)
    assert ev.ap_from_flags([True], 1, "11point") == pytest.approx(1.0)
    assert ev.ap_from_flags([True, True], 4, "11point") == pytest.approx(6 / 11)
    with pytest.raises(InputError):
        ev.ap_from_flags([True], 1, "bogus")


def perfect_instance(rng, n_videos=5, G=3):
    gts, dets = [], []
    for v in range(n_videos):
        for c in range(G):
            for k in range(int(rng.integers(1, 3))):
                s = 10.0 * k + float(rng.uniform(0, 5))
                e = s + float(rng.uniform(0.5, 4))
                gts.append(GT(f"v{v}", c, s, e))
                dets.append(P(f"v{v}", c, s, e, float(rng.uniform())))
    return dets, gts


def test_perfect_detections_give_map_one():
    dets, gts = perfect_instance(np.random.default_rng(4))
    for grid in ("thumos", "anet"):
        rep = ev.map_report(dets, gts, grid, num_classes=3)
        assert np.all(rep.ap == 1.0)
        assert all(v == 1.0 for v in rep.averages.values())


def test_empty_detections_give_zero():
    _, gts = perfect_instance(np.random.default_rng(5))
    rep = ev.map_report([], gts, "thumos", num_classes=3)
    assert np.all(rep.ap == 0.0)


def test_grids_and_ranges():
    assert ev.GRIDS["thumos"] == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
    assert len(ev.GRIDS["anet"]) == 10 and ev.GRIDS["anet"][-1] == 0.95
    ths, ranges = ev.resolve_grid([0.3, 0.5])
    assert ths == [0.3, 0.5] and ranges == {"avg": (0.3, 0.5)}
    with pytest.raises(InputError):
        ev.resolve_grid("coco")


def test_range_averages():
    gts = [GT("v", 0, 0, 10)]
    dets = [P("v", 0, 0, 4, 1.0)]  # tIoU 0.4
    rep = ev.map_report(dets, gts, "thumos", num_classes=1)
    assert rep.map.tolist() == [1, 1, 1, 1, 0, 0, 0]
    assert rep.averages["avg_0.1_0.5"] == pytest.approx(0.8)
    assert rep.averages["avg_0.1_0.7"] == pytest.approx(4 / 7)


def test_report_files(tmp_path):
    dets, gts = perfect_instance(np.random.default_rng(6), 2, 2)
    rep = ev.map_report(dets, gts, [0.5], class_names=["a", "b"])
    rep.write(tmp_path / "r.json", tmp_path / "r.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["mAP"] == {"0.5": 1.0} and doc["AP"]["0.5"] == {"a": 1.0, "b": 1.0}
    rows = list(csv.reader((tmp_path / "r.csv").open()))
    assert rows[0] == ["threshold", "class", "ap"] and len(rows) == 3


def test_roc_auc_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(2, 15))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 4, size=n) / 3
        assert ev.roc_auc(s, y) == pytest.approx(auc_oracle(s, y), abs=1e-12)
    assert ev.roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert ev.roc_auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(InputError):
        ev.roc_auc([0.1, 0.2], [1, 1])
