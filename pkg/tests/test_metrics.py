import numpy as np
import pytest

from weakrel.graph import BBox
from weakrel.metrics import (
    MATCH_VARIANTS,
    MatchMode,
    Triplet,
    average_precision_11pt,
    cap_per_image,
    interpolated_map,
    match_detections,
    recall_at_x,
    union_box,
    zero_shot_filter,
)
from oracles import random_instance, ref_map, ref_recall

A = BBox(0, 0, 10, 10)
B = BBox(20, 20, 30, 30)


def T(sb=A, sc=0, k=0, ob=B, oc=1, score=1.0):
    return Triplet(sb, sc, k, ob, oc, score)


def test_union_box():
    assert union_box(A, A) == A
    assert union_box(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)) == BBox(0, 0, 3, 3)
    assert union_box(A, B) == union_box(B, A)


def test_match_examples():
    rel = MatchMode("relationship")
    assert match_detections([T()], [T()], rel) == [True]
    assert match_detections([T(k=1)], [T()], rel) == [False]
    assert match_detections([T(score=0.9), T(score=0.8)], [T()], rel) == [True, False]


def test_match_modes_differ():
    # subject right, object shifted off: only subject-only mode accepts it
    det = T(ob=BBox(26, 26, 36, 36))
    gt = T()
    assert match_detections([det], [gt], MatchMode("relationship")) == [False]
    assert match_detections([det], [gt], MatchMode("predicate")) == [False]
    assert match_detections([det], [gt], MatchMode("subject-only")) == [True]
    # union boxes (0,0,36,36) vs (0,0,30,30): IoU = 900/1296 > 0.5
    assert match_detections([det], [gt], MatchMode("phrase")) == [True]


def test_iou_threshold_is_strict():
    gt = T(sb=BBox(0, 0, 2, 1), ob=BBox(0, 0, 2, 1))
    det = T(sb=BBox(0, 0, 1, 1), ob=BBox(0, 0, 1, 1))  # IoU exactly 0.5
    assert match_detections([det], [gt], MatchMode("relationship", 0.5)) == [False]
    assert match_detections([det], [gt], MatchMode("relationship", 0.3)) == [True]


def test_highest_overlap_gt_consumed():
    g1 = T(sb=BBox(0, 0, 10, 12))
    g2 = T(sb=BBox(0, 0, 10, 10))
    d1, d2 = T(score=0.9), T(sb=BBox(0, 0, 10, 12), score=0.8)
    assert match_detections([d1, d2], [g1, g2], MatchMode()) == [True, True]


def test_recall_examples():
    m = MatchMode()
    g_other = T(sb=BBox(50, 50, 60, 60))
    assert recall_at_x({"a": [T()]}, {"a": [T(), g_other]}, 50, m) == 0.5
    assert recall_at_x({"a": [T(), T(sb=BBox(50, 50, 60, 60))]}, {"a": [T(), g_other]}, 50, m) == 1.0
    assert recall_at_x({"a": [T(score=0.9), T(k=1, score=0.1)]}, {"a": [T()]}, 1, m) == 1.0
    # cut-off applies per image in score order
    assert recall_at_x({"a": [T(k=1, score=0.9), T(score=0.1)]}, {"a": [T()]}, 1, m) == 0.0


def test_recall_requires_ground_truth():
    with pytest.raises(ValueError):
        recall_at_x({"a": [T()]}, {"a": []}, 50, MatchMode())
    with pytest.raises(ValueError):
        recall_at_x({}, {"a": [T()]}, 0, MatchMode())


def test_ap_examples():
    assert average_precision_11pt([True], 1) == 1.0
    assert average_precision_11pt([False, True], 1) == 0.5
    assert average_precision_11pt([], 3) == 0.0
    with pytest.raises(ValueError):
        average_precision_11pt([True], 0)


def test_map_single_gt_fp_then_tp():
    gts = {"a": [T()]}
    dets = {"a": [T(sb=BBox(40, 40, 45, 45), score=0.9), T(score=0.5)]}
    report = interpolated_map(dets, gts, MatchMode())
    assert report.mean_ap == 0.5


def test_map_ignores_classes_without_ground_truth():
    gts = {"a": [T()]}
    dets = {"a": [T(score=0.9), T(k=3, score=0.95)]}
    report = interpolated_map(dets, gts, MatchMode())
    assert list(report.per_class) == ["0-0-1"]
    assert report.mean_ap == 1.0


def test_hoi_class_key_merges_subject_classes():
    gts = {"a": [T(sc=0), T(sc=2, sb=BBox(40, 40, 50, 50))]}
    dets = {"a": [T(sc=0), T(sc=2, sb=BBox(40, 40, 50, 50))]}
    assert len(interpolated_map(dets, gts, MatchMode(), "hoi").per_class) == 1
    assert len(interpolated_map(dets, gts, MatchMode(), "triplet").per_class) == 2
    with pytest.raises(ValueError):
        interpolated_map(dets, gts, MatchMode(), "subject")


def test_distractor_images_only_add_false_positives():
    gts = {"a": [T()]}
    base = interpolated_map({"a": [T(score=0.5)]}, gts, MatchMode()).mean_ap
    with_distractor = interpolated_map({"a": [T(score=0.5)], "z": [T(score=0.9)]}, gts, MatchMode()).mean_ap
    assert base == 1.0 and with_distractor == 0.5


def test_zero_shot_filter():
    gts = [T(), T(k=1), T(sc=3)]
    assert zero_shot_filter(gts, {t.category for t in gts}) == []
    assert zero_shot_filter(gts, {(9, 9, 9)}) == gts
    assert zero_shot_filter(gts, {(0, 0, 1)}) == gts[1:]


def test_cap_per_image():
    dets = {"a": [T(score=s) for s in (0.1, 0.9, 0.5)]}
    assert [d.score for d in cap_per_image(dets, 2)["a"]] == [0.9, 0.5]
    assert len(cap_per_image(dets, None)["a"]) == 3


def test_mode_validation():
    with pytest.raises(ValueError):
        MatchMode("union")
    with pytest.raises(ValueError):
        MatchMode("phrase", 0.0)


def test_report_serialization():
    report = interpolated_map({"a": [T()]}, {"a": [T()]}, MatchMode())
    report.recall["50"] = 1.0
    d = report.to_dict()
    assert d["mAP"] == 1.0 and d["recall"] == {"50": 1.0}
    assert "R@50" in report.table()


@pytest.mark.parametrize("variant", MATCH_VARIANTS)
@pytest.mark.parametrize("thr", [0.5, 0.3])
def test_against_brute_force_reference(variant, thr):
    rng = np.random.default_rng(100 * MATCH_VARIANTS.index(variant) + int(10 * thr))
    mode = MatchMode(variant, thr)
    for _ in range(25):
        dets, gts = random_instance(rng)
        if sum(len(v) for v in gts.values()) == 0:
            continue
        for x in (1, 3, 50):
            assert recall_at_x(dets, gts, x, mode) == ref_recall(dets, gts, x, variant, thr)
        for key in ("triplet", "hoi"):
            aps, mean = ref_map(dets, gts, variant, thr, key)
            report = interpolated_map(dets, gts, mode, key)
            assert report.mean_ap == mean
            assert [report.per_class[k]["ap"] for k in sorted(report.per_class)] == [
                aps[c] for c in sorted(aps, key=lambda c: "-".join(map(str, c)))
            ]
