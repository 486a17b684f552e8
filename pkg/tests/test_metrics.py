import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_ap, random_instance
from promptseg.detect2seg import BBox, DetectionSet, Mask, rasterize_box
from promptseg.metrics import (
    CONVENTIONS,
    GroundTruth,
    average_precision,
    build_report,
    case_accuracy,
    dice,
    iou_box,
    iou_mask,
    mean_detection_iou,
    mean_dice,
)

ALL_3X3 = [Mask(np.array([(v >> i) & 1 for i in range(9)], bool).reshape(3, 3)) for v in range(512)]
BITS = [[(v >> i) & 1 for i in range(9)] for v in range(512)]


def test_dice_iou_exhaustive_3x3():
    for a in range(512):
        ma, ba = ALL_3X3[a], BITS[a]
        for b in range(512):
            inter = sum(x & y for x, y in zip(ba, BITS[b]))
            union = sum(x | y for x, y in zip(ba, BITS[b]))
            total = sum(ba) + sum(BITS[b])
            want_dice = 1.0 if total == 0 else 2 * inter / total
            want_iou = 1.0 if union == 0 else inter / union
            assert dice(ma, ALL_3X3[b]) == want_dice
            assert iou_mask(ma, ALL_3X3[b]) == want_iou


def test_dice_examples():
    a = Mask.zeros(4, 4)
    a.bits[0:2, 0:2] = True
    b = Mask.zeros(4, 4)
    b.bits[1:3, 0:2] = True
    far = Mask.zeros(4, 4)
    far.bits[3, 3] = True
    assert dice(a, a) == 1.0
    assert dice(a, far) == 0.0
    assert dice(a, b) == 0.5
    assert dice(Mask.zeros(4, 4), Mask.zeros(4, 4)) == 1.0
    with pytest.raises(ValueError):
        dice(a, Mask.zeros(3, 3))


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 511), st.integers(1, 511))
def test_dice_iou_identity_and_symmetry(a, b):
    ma, mb = ALL_3X3[a], ALL_3X3[b]
    d, j = dice(ma, mb), iou_mask(ma, mb)
    assert d == dice(mb, ma) and j == iou_mask(mb, ma)
    assert d >= j
    assert d == pytest.approx(2 * j / (1 + j), abs=1e-15)


def test_iou_box_examples():
    assert iou_box(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)) == 1.0
    assert iou_box(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert iou_box(BBox(0, 0, 1, 1), BBox(1, 0, 2, 1)) == 0.0


def gt(case, label, boxes):
    return GroundTruth(case, label, tuple(BBox(*b, label=label) for b in boxes))


def test_ap_worked_example():
    gts = [gt("a", "glioma", [(0, 0, 10, 10)]), gt("b", "glioma", [(0, 0, 10, 10)])]
    dets = [
        DetectionSet("a", 32, 32, (BBox(0, 0, 10, 10, 0.9, "glioma"),)),
        DetectionSet("c", 32, 32, (BBox(0, 0, 10, 10, 0.8, "glioma"),)),
        DetectionSet("b", 32, 32, (BBox(0, 0, 10, 10, 0.7, "glioma"),)),
    ]
    ap = average_precision(dets, gts)
    assert ap.per_class["glioma"] == pytest.approx(1.0 * 0.5 + (2 / 3) * 0.5, abs=1e-15)
    assert round(ap.map, 4) == 0.8333


def test_ap_perfect_and_miss():
    gts = [gt("a", "glioma", [(0, 0, 10, 10)]), gt("b", "pituitary", [(5, 5, 15, 15)])]
    perfect = [DetectionSet("a", 32, 32, (BBox(0, 0, 10, 10, 0.9, "glioma"),)),
               DetectionSet("b", 32, 32, (BBox(5, 5, 15, 15, 0.6, "pituitary"),))]
    assert average_precision(perfect, gts).per_class == {"glioma": 1.0, "pituitary": 1.0}
    missing = [DetectionSet("a", 32, 32, (BBox(20, 20, 30, 30, 0.9, "glioma"),))]
    res = average_precision(missing, gts)
    assert res.per_class == {"glioma": 0.0, "pituitary": 0.0} and res.map == 0.0


def test_ap_excludes_classes_without_gt():
    gts = [gt("a", "glioma", [(0, 0, 10, 10)])]
    dets = [DetectionSet("a", 32, 32, (BBox(0, 0, 10, 10, 0.9, "glioma"), BBox(0, 0, 5, 5, 0.9, "meningioma")))]
    res = average_precision(dets, gts)
    assert res.excluded == ["meningioma"] and res.map == 1.0


@pytest.mark.parametrize("seed", range(200))
def test_ap_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    cases, gts, dets = random_instance(rng)
    want = oracle_ap(dets, gts)
    gt_objs = [gt(c, "glioma", gts.get(c, [])) for c in cases]
    det_objs = [
        DetectionSet(c, 20, 20, tuple(BBox(*d[3], score=d[2], label="glioma") for d in dets if d[0] == c))
        for c in cases
    ]
    got = average_precision(det_objs, gt_objs).per_class["glioma"]
    assert abs(got - float(want)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_invariant_under_monotone_score_map(seed):
    rng = np.random.default_rng(seed)
    cases, gts, dets = random_instance(rng)
    gt_objs = [gt(c, "glioma", gts.get(c, [])) for c in cases]

    def build(f):
        return [DetectionSet(c, 20, 20, tuple(BBox(*d[3], score=f(d[2]), label="glioma") for d in dets if d[0] == c))
                for c in cases]

    a = average_precision(build(lambda s: s), gt_objs).per_class["glioma"]
    b = average_precision(build(lambda s: s**3 * 0.5), gt_objs).per_class["glioma"]
    assert a == b


def test_mean_detection_iou_examples():
    g1 = gt("a", "glioma", [(0, 0, 2, 2)])
    g2 = gt("b", "glioma", [(0, 0, 2, 2)])
    d1 = DetectionSet("a", 8, 8, (BBox(0, 0, 2, 2, 0.9, "glioma"), BBox(4, 4, 6, 6, 0.1, "glioma")))
    d2 = DetectionSet("b", 8, 8, (BBox(1, 1, 3, 3, 0.8, "glioma"),))
    assert mean_detection_iou([d1], [g1]) == 1.0
    assert mean_detection_iou([], [g1]) == 0.0
    assert mean_detection_iou([d1, d2], [g1, g2]) == pytest.approx(4 / 7, abs=1e-15)
    assert mean_detection_iou([d1], [GroundTruth("h", "healthy")]) is None


def test_case_accuracy():
    truth = {f"c{i}": "glioma" for i in range(12)}
    pred = dict(truth, c5="healthy")
    assert round(case_accuracy(pred, truth), 4) == 0.9167
    assert case_accuracy(truth, truth) == 1.0
    with pytest.raises(ValueError):
        case_accuracy({}, {})
    with pytest.raises(ValueError):
        case_accuracy({"x": "glioma"}, {"y": "glioma"})


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd")), min_size=1, max_size=30))
def test_case_accuracy_counts_integer(pairs):
    truth = {str(i): t for i, (t, _) in enumerate(pairs)}
    pred = {str(i): p for i, (_, p) in enumerate(pairs)}
    n = len(pairs)
    acc = case_accuracy(pred, truth)
    assert 0 <= acc <= 1
    assert abs(acc * n - round(acc * n)) < 1e-9


def test_mean_dice_examples():
    m = rasterize_box(BBox(2, 2, 6, 6), 8, 8)
    half = Mask(m.bits.copy())
    half.bits[2:6, 4:6] = False
    gts = [GroundTruth("a", "glioma", (BBox(2, 2, 6, 6),), m), GroundTruth("b", "glioma", (BBox(2, 2, 6, 6),), m),
           GroundTruth("h", "healthy")]
    assert mean_dice({"a": m, "b": m}, gts) == 1.0
    # |P| = 8, |G| = 16, overlap 8 -> 2/3; mean with 1.0
    assert mean_dice({"a": m, "b": half}, gts) == pytest.approx((1.0 + 2 / 3) / 2)
    with pytest.raises(ValueError):
        mean_dice({}, [GroundTruth("t", "glioma", (BBox(0, 0, 1, 1),))])


def test_healthy_gt_cannot_have_boxes():
    with pytest.raises(ValueError):
        GroundTruth("h", "healthy", (BBox(0, 0, 1, 1),))


def test_self_evaluation_report_is_perfect():
    gts, dets, masks = [], [], {}
    for i, label in enumerate(["glioma", "meningioma", "pituitary"]):
        box = BBox(2 + i, 3, 12 + i, 14, 1.0, label)
        mask = rasterize_box(box, 16, 16)
        gts.append(GroundTruth(f"c{i}", label, (box,), mask, 16, 16))
        dets.append(DetectionSet(f"c{i}", 16, 16, (box,)))
        masks[f"c{i}"] = mask
    gts.append(GroundTruth("h", "healthy", (), None, 16, 16))
    dets.append(DetectionSet("h", 16, 16, ()))
    report = build_report(dets, gts, {g.case_id: g.label for g in gts}, masks).to_dict()
    assert report["metrics"] == {"map50": 1.0, "mean_iou": 1.0, "mean_dice": 1.0, "case_accuracy": 1.0}
    assert report["conventions"] == CONVENTIONS
    assert report["schema_version"] == 1
    assert report["counts"] == {"cases": 4, "gt_boxes": 3, "pred_boxes": 3}
