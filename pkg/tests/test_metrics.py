import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mddfnet.boxes import Detection, GroundTruthBox, iou_xyxy
from mddfnet.errors import EvaluationError
from mddfnet.metrics import (IOU_THRESHOLDS, APReport, ap_by_size, average_precision, evaluate, map_over_thresholds,
                             match_detections, mean_ap, per_class_table)

GOLDEN = Path(__file__).parent / "golden" / "per_class_table.txt"


# -- hand examples ---------------------------------------------------------------

def test_iou_examples():
    assert iou_xyxy((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou_xyxy((0, 0, 2, 2), (5, 5, 6, 6)) == 0.0
    assert iou_xyxy((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert iou_xyxy((0, 0, 0, 2), (0, 0, 2, 2)) == 0.0


def test_single_match_rule():
    g = [GroundTruthBox((0, 0, 10, 10), 0)]
    m = match_detections([Detection((0, 0, 10, 9), 0.9, 0)], g, 0.5)
    assert m.tp.tolist() == [True]
    m = match_detections([Detection((0, 0, 10, 9), 0.6, 0), Detection((0, 0, 10, 10), 0.9, 0)], g, 0.5)
    assert [d.score for d in m.detections] == [0.9, 0.6]
    assert m.tp.tolist() == [True, False]


def test_ap_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([False, True], 1) == 0.5
    assert average_precision([], 3) == 0.0
    assert average_precision([], 0) is None
    assert average_precision([False], 0) == 0.0


def test_mean_ap_examples(rng):
    assert mean_ap([0.6, 0.8]) == pytest.approx(0.7, abs=1e-15)
    assert mean_ap([0.37]) == 0.37
    aps = rng.random(45).tolist()
    assert abs(mean_ap(aps) - math.fsum(aps) / 45) < 1e-12
    assert mean_ap([0.5, None]) == 0.5
    with pytest.raises(EvaluationError):
        mean_ap([None])
    with pytest.raises(EvaluationError):
        mean_ap([])


def test_recall_grid_exact_for_twenty_gts():
    # 7 of 20 found reaches the 0.35 grid point exactly
    flags = [True] * 7
    assert average_precision(flags, 20) == pytest.approx(36 / 101, abs=1e-15)


def test_evaluate_undefined():
    with pytest.raises(EvaluationError):
        evaluate([], [])


def test_small_only_partitions_absent():
    gts = [GroundTruthBox((i * 20.0, 0, i * 20.0 + 10, 10), 0, "a") for i in range(3)]
    dets = [Detection(g.box, 0.9, 0, "a") for g in gts]
    sizes = ap_by_size(dets, gts)
    assert sizes["small"] == 1.0
    assert sizes["medium"] is None and sizes["large"] is None


def test_perfect_mixed_sizes():
    gts = [GroundTruthBox((0, 0, 10, 10), 0, "a"), GroundTruthBox((50, 50, 100, 100), 1, "a"),
           GroundTruthBox((0, 0, 200, 150), 2, "b")]
    dets = [Detection(g.box, 0.5 + i / 10, g.class_id, g.image_id) for i, g in enumerate(gts)]
    rep = evaluate(dets, gts, 3)
    assert rep.map50 == rep.map75 == rep.map5095 == 1.0
    assert rep.ap_small == rep.ap_medium == rep.ap_large == 1.0


def test_class_without_gt_or_dets_is_skipped():
    gts = [GroundTruthBox((0, 0, 10, 10), 0, "a")]
    rep = evaluate([Detection((0, 0, 10, 10), 0.9, 0, "a")], gts, num_classes=4)
    assert rep.map50 == 1.0
    assert rep.per_class_map50[3] is None


def test_detections_match_only_within_image():
    gts = [GroundTruthBox((0, 0, 10, 10), 0, "a")]
    m = match_detections([Detection((0, 0, 10, 10), 0.9, 0, "b")], gts, 0.5)
    assert m.tp.tolist() == [False]


def test_ignored_ground_truth_drops_detection():
    gts = [GroundTruthBox((0, 0, 10, 10), 0), GroundTruthBox((50, 50, 60, 60), 0)]
    dets = [Detection((0, 0, 10, 10), 0.9, 0), Detection((50, 50, 60, 60), 0.8, 0)]
    m = match_detections(dets, gts, 0.5, gt_ignore=[True, False])
    assert [d.score for d in m.detections] == [0.8]
    assert m.tp.tolist() == [True] and m.n_gt == 1


# -- brute-force oracle ------------------------------------------------------------

def _oracle_flags(dets, gts, thr):
    """Enumerate every injective det->gt assignment and keep the one the greedy rule admits."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    iou = [[iou_xyxy(dets[i].box, g.box) if (dets[i].image_id, dets[i].class_id) == (g.image_id, g.class_id) else 0.0
            for g in gts] for i in order]
    admitted = []

    def rec(k, taken):
        if k == len(order):
            admitted.append(list(taken))
            return
        for g in [None] + list(range(len(gts))):
            if g is not None and (g in taken or iou[k][g] < thr):
                continue
            free = [h for h in range(len(gts)) if h not in taken and iou[k][h] >= thr]
            if g is None and free:
                continue
            if g is not None and iou[k][g] < max(iou[k][h] for h in free):
                continue
            taken.append(g)
            rec(k + 1, taken)
            taken.pop()

    rec(0, [])
    assert len(admitted) == 1
    return [g is not None for g in admitted[0]]


def _oracle_ap(flags, n_gt):
    if n_gt == 0:
        return None if not flags else 0.0
    tp = fp = 0
    pr = []
    for f in flags:
        tp += f
        fp += not f
        pr.append((tp, tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        total += max([p for t, p in pr if 100 * t >= k * n_gt], default=0.0)
    return total / 101


def _random_instance(rng, max_n=6, classes=2, images=("a", "b")):
    n_g = int(rng.integers(0, max_n + 1))
    n_d = int(rng.integers(0, max_n + 1))
    gts = []
    for _ in range(n_g):
        x, y = rng.uniform(0, 40, 2)
        w, h = rng.uniform(4, 30, 2)
        gts.append(GroundTruthBox((x, y, x + w, y + h), int(rng.integers(classes)), str(rng.choice(images))))
    dets = []
    for _ in range(n_d):
        if gts and rng.random() < 0.7:
            g = gts[int(rng.integers(len(gts)))]
            j = rng.normal(0, 3, 4)
            box = (g.box[0] + j[0], g.box[1] + j[1], g.box[2] + abs(j[2]) + 1, g.box[3] + abs(j[3]) + 1)
            cls = g.class_id if rng.random() < 0.85 else int(rng.integers(classes))
            dets.append(Detection(box, float(rng.random()), cls, g.image_id))
        else:
            x, y = rng.uniform(0, 40, 2)
            dets.append(Detection((x, y, x + 10, y + 10), float(rng.random()), int(rng.integers(classes)),
                                  str(rng.choice(images))))
    return dets, gts


def test_evaluator_equals_brute_force():
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(1000):
        dets, gts = _random_instance(rng)
        if not dets and not gts:
            continue
        _, table = map_over_thresholds(dets, gts, IOU_THRESHOLDS, num_classes=2)
        for thr in (0.5, 0.75, 0.9):
            for c in range(2):
                dc = [d for d in dets if d.class_id == c]
                gc = [g for g in gts if g.class_id == c]
                m = match_detections(dc, gc, thr)
                flags = _oracle_flags(dc, gc, thr)
                assert m.tp.tolist() == flags
                ref = _oracle_ap(flags, len(gc))
                got = table[(c, thr)]
                assert (got is None and ref is None) or abs(got - ref) < 1e-12
        checked += 1
    assert checked > 900


def test_map5095_is_mean_of_thresholds():
    rng = np.random.default_rng(7)
    for _ in range(50):
        dets, gts = _random_instance(rng)
        if not gts:
            continue
        rep = evaluate(dets, gts, 2)
        assert abs(rep.map5095 - math.fsum(rep.map_per_threshold) / 10) < 1e-12
        assert all(0.0 <= m <= 1.0 for m in rep.map_per_threshold)


def test_size_partition_matches_filter_and_reevaluate():
    rng = np.random.default_rng(5)
    for trial in range(40):
        gts, dets = [], []
        for k in range(int(rng.integers(2, 8))):
            side = float(rng.choice([12.0, 20.0, 50.0, 80.0, 120.0]))
            x = k * 200.0
            g = GroundTruthBox((x, 0.0, x + side, side), int(rng.integers(2)), "img")
            gts.append(g)
            if rng.random() < 0.8:
                j = rng.uniform(-0.004, 0.004, 4) * side  # IoU > 0.97: matches at every threshold
                dets.append((k, Detection((g.box[0] + j[0], j[1], g.box[2] + j[2], g.box[3] + j[3]), float(rng.random()),
                                          g.class_id, "img")))
        for _ in range(int(rng.integers(0, 3))):
            dets.append((-1, Detection((5000.0, 5000.0, 5010.0, 5010.0), float(rng.random()), int(rng.integers(2)),
                                       "img")))
        got = ap_by_size([d for _, d in dets], gts, num_classes=2)
        for name, (lo, hi) in {"small": (0, 32**2), "medium": (32**2, 96**2), "large": (96**2, np.inf)}.items():
            keep = [k for k, g in enumerate(gts) if lo <= g.area < hi]
            if not keep:
                assert got[name] is None
                continue
            fg = [gts[k] for k in keep]
            fd = [d for k, d in dets if k in keep or k == -1]
            maps, _ = map_over_thresholds(fd, fg, IOU_THRESHOLDS, num_classes=2)
            ref = float(np.mean([m for m in maps if m is not None]))
            assert got[name] == pytest.approx(ref, abs=1e-12), (trial, name)


def test_out_of_partition_detection_counts_once_unmatched():
    # a loose box on a large object is ignored at 0.5 but is a plain FP at 0.95
    gts = [GroundTruthBox((0, 0, 10, 10), 0), GroundTruthBox((100, 0, 300, 200), 0)]
    dets = [Detection((0, 0, 10, 10), 0.5, 0), Detection((100, 0, 300, 180), 0.9, 0)]
    maps, _ = map_over_thresholds(dets, gts, (0.5, 0.95), gt_ignore=[False, True])
    assert maps == [1.0, 0.5]


# -- properties -------------------------------------------------------------------

instances = st.integers(0, 2**32 - 1).map(lambda s: _random_instance(np.random.default_rng(s)))


@settings(max_examples=200, deadline=None)
@given(instances, st.sampled_from(["cube", "exp", "affine", "logit"]))
def test_monotone_rescaling_invariance(inst, kind):
    dets, gts = inst
    if not dets and not gts:
        return
    f = {"cube": lambda s: s**3, "exp": lambda s: math.exp(5 * s) / 200, "affine": lambda s: 0.1 + 0.8 * s,
         "logit": lambda s: 1 / (1 + math.exp(-(s - 0.5) * 9))}[kind]
    moved = [Detection(d.box, f(d.score), d.class_id, d.image_id) for d in dets]
    a, _ = map_over_thresholds(dets, gts, IOU_THRESHOLDS, 2)
    b, _ = map_over_thresholds(moved, gts, IOU_THRESHOLDS, 2)
    assert a == b


@settings(max_examples=100, deadline=None)
@given(instances)
def test_extra_unmatched_gt_never_increases_ap(inst):
    dets, gts = inst
    extra = GroundTruthBox((900.0, 900.0, 920.0, 920.0), 0, "a")
    a, ta = map_over_thresholds(dets, gts, IOU_THRESHOLDS, 2)
    b, tb = map_over_thresholds(dets, gts + [extra], IOU_THRESHOLDS, 2)
    for key, v in tb.items():
        if ta[key] is not None and v is not None:
            assert v <= ta[key] + 1e-15


@settings(max_examples=100, deadline=None)
@given(instances, st.integers(0, 1))
def test_lowest_score_false_positive_never_increases_ap(inst, cls):
    dets, gts = inst
    low = min([d.score for d in dets], default=1.0) / 2
    extra = Detection((700.0, 700.0, 720.0, 720.0), low, cls, "a")
    _, ta = map_over_thresholds(dets, gts, IOU_THRESHOLDS, 2)
    _, tb = map_over_thresholds(dets + [extra], gts, IOU_THRESHOLDS, 2)
    for key, v in ta.items():
        if v is not None:
            assert tb[key] <= v + 1e-15


# -- report table -------------------------------------------------------------------

def _report(per_class):
    return APReport({}, [0.0] * 10, 0.0, 0.0, 0.0, None, None, None, per_class)


def test_table_pne_row():
    table = per_class_table(_report({0: 0.958}), ["pne"])
    rows = table.splitlines()
    assert " ".join(rows[1].split()) == "pne 95.8"


def test_table_empty_is_header_only():
    assert per_class_table(_report({}), []).splitlines() == ["class  AP50"]


def test_table_golden():
    names = ["pl80", "pne", "i5", "p11", "w57", "pl100"]
    aps = {0: 0.912, 1: 0.958, 2: 0.0, 3: 1.0, 4: None, 5: 0.07349}
    assert per_class_table(_report(aps), names) + "\n" == GOLDEN.read_text()


def test_report_dict_keys():
    gts = [GroundTruthBox((0, 0, 10, 10), 0, "a")]
    d = evaluate([Detection((0, 0, 10, 10), 0.9, 0, "a")], gts, 1).to_dict()
    assert set(d) == {"map50", "map75", "map5095", "ap_small", "ap_medium", "ap_large", "map_per_threshold",
                      "per_class_map50"}
    assert list(d["map_per_threshold"]) == [f"{t:.2f}" for t in IOU_THRESHOLDS]
