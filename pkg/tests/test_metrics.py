import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oreyolo.head import Detection
from oreyolo.metrics import MAP_THRESHOLDS, GroundTruth, average_precision, iou, map_range


# ---------------------------------------------------------------- oracles


def iou_ref(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def tp_count(ranked_prefix, gts, thr):
    """Greedy matching of a ranked prefix of (image, det); returns number of true positives."""
    used = set()
    tp = 0
    for img, d in ranked_prefix:
        best, best_j = -1.0, None
        for j, g in enumerate(gts[img]):
            if (img, j) in used or g.class_id != d.class_id:
                continue
            v = iou_ref(d.box, g.box)
            if v >= thr and v > best:
                best, best_j = v, j
        if best_j is not None:
            used.add((img, best_j))
            tp += 1
    return tp


def ap_reference(dets, gts, thr, class_id=None):
    """Enumerate every cut-off k of the ranked list, then integrate the upper envelope of precision."""
    flat = [(img, d) for img, ds in enumerate(dets) for d in ds if class_id is None or d.class_id == class_id]
    ranked = sorted(flat, key=lambda t: -t[1].confidence)
    n_pos = sum(1 for gs in gts for g in gs if class_id is None or g.class_id == class_id)
    if n_pos == 0 or not ranked:
        return 0.0
    prec, rec = [], []
    for k in range(1, len(ranked) + 1):
        tp = tp_count(ranked[:k], gts, thr)
        prec.append(tp / k)
        rec.append(tp / n_pos)
    ap, prev_r = 0.0, 0.0
    for k in range(len(ranked)):
        if rec[k] > prev_r:
            ap += (rec[k] - prev_r) * max(prec[k:])
            prev_r = rec[k]
    return ap


def map_reference(dets, gts, conf_thr=0.25):
    classes = sorted({g.class_id for gs in gts for g in gs})
    per = {}
    for c in classes:
        aps = [ap_reference(dets, gts, t, c) for t in MAP_THRESHOLDS]
        confident = [[d for d in ds if d.confidence >= conf_thr] for ds in dets]
        flat = sorted(((i, d) for i, ds in enumerate(confident) for d in ds if d.class_id == c), key=lambda t: -t[1].confidence)
        tp = tp_count(flat, gts, 0.5)
        n_pos = sum(1 for gs in gts for g in gs if g.class_id == c)
        per[c] = dict(precision=tp / len(flat) if flat else 0.0, recall=tp / n_pos, aps=aps)
    return per


def random_instance(rng, max_boxes=6):
    n_img = int(rng.integers(1, 3))
    dets, gts = [], []
    budget = max_boxes
    for _ in range(n_img):
        ng = int(rng.integers(0, min(3, budget) + 1))
        budget -= ng
        g_list = []
        for _ in range(ng):
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(5, 20, 2)
            g_list.append(GroundTruth(x, y, x + w, y + h, int(rng.integers(0, 2))))
        d_list = []
        for _ in range(int(rng.integers(0, min(3, budget) + 1)) if budget > 0 else 0):
            budget -= 1
            if g_list and rng.random() < 0.7:
                g = g_list[int(rng.integers(len(g_list)))]
                j = rng.normal(0, 2.5, 4)
                x1, y1, x2, y2 = g.x1 + j[0], g.y1 + j[1], g.x2 + j[2], g.y2 + j[3]
                if x2 <= x1 or y2 <= y1:
                    x1, y1, x2, y2 = g.box
                c = g.class_id if rng.random() < 0.85 else 1 - g.class_id
            else:
                x1, y1 = rng.uniform(0, 50, 2)
                x2, y2 = x1 + rng.uniform(5, 20), y1 + rng.uniform(5, 20)
                c = int(rng.integers(0, 2))
            d_list.append(Detection(x1, y1, x2, y2, c, float(rng.uniform(0.05, 1))))
        dets.append(d_list)
        gts.append(g_list)
    return dets, gts


# ---------------------------------------------------------------- IoU


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert abs(iou((0, 0, 2, 2), (1, 1, 3, 3)) - 1 / 7) < 1e-12


def test_iou_monte_carlo_cross_check():
    rng = np.random.default_rng(1)
    a, b = (0.3, 0.1, 2.2, 1.9), (1.0, 0.7, 2.9, 2.5)
    pts = rng.uniform(0, 3, (400_000, 2))
    ia = (pts[:, 0] >= a[0]) & (pts[:, 0] <= a[2]) & (pts[:, 1] >= a[1]) & (pts[:, 1] <= a[3])
    ib = (pts[:, 0] >= b[0]) & (pts[:, 0] <= b[2]) & (pts[:, 1] >= b[1]) & (pts[:, 1] <= b[3])
    assert abs((ia & ib).sum() / (ia | ib).sum() - iou(a, b)) < 4e-3


# ---------------------------------------------------------------- AP


def test_ap_trivial_cases():
    g = [[GroundTruth(0, 0, 10, 10, 0)]]
    assert average_precision([[Detection(0, 0, 10, 10, 0, 0.9)]], g) == 1.0
    assert average_precision([[]], g) == 0.0


def test_ap_hand_example():
    # ranks: TP, FP, TP over 2 gts -> P/R points (1, .5), (.5, .5), (2/3, 1)
    g = [[GroundTruth(0, 0, 10, 10, 0), GroundTruth(20, 20, 30, 30, 0)]]
    d = [[Detection(0, 0, 10, 10, 0, 0.9), Detection(50, 50, 60, 60, 0, 0.8), Detection(20, 20, 30, 30, 0, 0.7)]]
    assert abs(average_precision(d, g) - (0.5 * 1 + 0.5 * 2 / 3)) < 1e-12


def test_duplicate_detection_is_false_positive():
    g = [[GroundTruth(0, 0, 10, 10, 0)]]
    d = [[Detection(0, 0, 10, 10, 0, 0.9), Detection(0, 0, 10, 10, 0, 0.8)]]
    assert average_precision(d, g) == 1.0
    d = [[Detection(0, 0, 10, 10, 0, 0.7), Detection(0, 0, 10, 10, 0, 0.8)]]
    assert average_precision(d, g) == 1.0


def test_highest_iou_gt_is_taken():
    # det overlaps gt A at 0.54 and gt B at 0.67; taking B leaves A for the second det
    gA, gB = GroundTruth(0, 0, 10, 10, 0), GroundTruth(5, 0, 15, 10, 0)
    d1 = Detection(3, 0, 13, 10, 0, 0.9)
    d2 = Detection(0, 0, 10, 10, 0, 0.8)
    assert average_precision([[d1, d2]], [[gA, gB]], 0.5) == 1.0


@given(st.integers(0, 1_000_000), st.sampled_from(MAP_THRESHOLDS))
def test_ap_matches_enumeration(seed, thr):
    dets, gts = random_instance(np.random.default_rng(seed))
    for c in (None, 0, 1):
        assert abs(average_precision(dets, gts, thr, c) - ap_reference(dets, gts, thr, c)) < 1e-9


@given(st.integers(0, 1_000_000))
def test_ap_non_increasing_in_threshold(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    aps = [average_precision(dets, gts, t, 0) for t in MAP_THRESHOLDS]
    assert all(0 <= a <= 1 for a in aps)
    assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


@given(st.integers(0, 1_000_000))
def test_low_confidence_false_positive_never_helps(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    before = average_precision(dets, gts, 0.5, 0)
    fp = Detection(900, 900, 910, 910, 0, 0.001)
    after = average_precision([ds + ([fp] if i == 0 else []) for i, ds in enumerate(dets)], gts, 0.5, 0)
    assert after <= before + 1e-12


# ---------------------------------------------------------------- mAP over thresholds


def test_map_range_perfect():
    g = [[GroundTruth(0, 0, 10, 10, 0), GroundTruth(20, 0, 30, 10, 1)]]
    d = [[Detection(0, 0, 10, 10, 0, 0.9), Detection(20, 0, 30, 10, 1, 0.8)]]
    r = map_range(d, g)
    for m in (*r.per_class.values(), r.overall):
        assert (m.precision, m.recall, m.map50, m.map75, m.map50_95) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_map_range_only_first_threshold():
    # 10x10 gt vs 10x5.2 det: IoU 0.52
    g = [[GroundTruth(0, 0, 10, 10, 0)]]
    d = [[Detection(0, 0, 10, 5.2, 0, 0.9)]]
    r = map_range(d, g)
    assert r.overall.map50 == 1.0
    assert abs(r.overall.map50_95 - 0.1) < 1e-12
    assert r.overall.map75 == 0.0


@given(st.integers(0, 1_000_000))
def test_map_range_matches_loop_oracle(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    r = map_range(dets, gts)
    ref = map_reference(dets, gts)
    assert sorted(r.per_class) == sorted(ref)
    for c, m in r.per_class.items():
        assert abs(m.precision - ref[c]["precision"]) < 1e-9
        assert abs(m.recall - ref[c]["recall"]) < 1e-9
        for a, b in zip(m.per_threshold, ref[c]["aps"]):
            assert abs(a - b) < 1e-9
        assert abs(m.map50_95 - np.mean(ref[c]["aps"])) < 1e-9
        assert abs(m.map50 - ref[c]["aps"][0]) < 1e-9
        assert abs(m.map75 - ref[c]["aps"][5]) < 1e-9
    if ref:
        assert abs(r.overall.map50_95 - np.mean([np.mean(v["aps"]) for v in ref.values()])) < 1e-9
        assert abs(r.overall.map50_95 - sum(r.overall.per_threshold) / 10) < 1e-12
        assert r.overall.map50_95 <= r.overall.map50 + 1e-12
        assert r.overall.map75 <= r.overall.map50 + 1e-12


def test_classes_without_gt_are_excluded():
    g = [[GroundTruth(0, 0, 10, 10, 0)]]
    d = [[Detection(0, 0, 10, 10, 0, 0.9), Detection(40, 40, 50, 50, 1, 0.9)]]
    r = map_range(d, g)
    assert list(r.per_class) == [0]
    assert r.overall.map50 == 1.0


def test_report_and_csv_schema():
    g = [[GroundTruth(0, 0, 10, 10, 0), GroundTruth(20, 0, 30, 10, 1)]]
    d = [[Detection(0, 0, 10, 10, 0, 0.9)]]
    r = map_range(d, g)
    r.class_names = {0: "gold", 1: "pyrite"}
    rep = r.to_report()
    for label in ("gold", "pyrite", "all"):
        for col in ("Precision", "Recall", "mAP50", "mAP75", "mAP50-95"):
            assert f"{label}.{col} = " in rep
    lines = r.to_csv().splitlines()
    assert lines[0] == "Type,Precision,Recall,mAP50,mAP75,mAP50-95"
    assert [l.split(",")[0] for l in lines[1:]] == ["gold", "pyrite", "all"]
    assert lines[2].split(",")[1:] == ["0.000000"] * 5


def test_mismatched_image_counts():
    with pytest.raises(ValueError):
        average_precision([[]], [[], []])
