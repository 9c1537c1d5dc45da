import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import ap_instance, nms_instance
from oracles import ap_bruteforce, box_iou, nms_reference
from weevilwatch.detection import (
    MAP_IOU_THRESHOLDS,
    AlignmentParams,
    BoundingBox,
    Detection,
    DroppedBox,
    GroundTruth,
    LetterboxTransform,
    alignment_score,
    assign_anchors,
    average_precision,
    composite_loss,
    evaluate_detections,
    grid_scales,
    iou,
    letterbox_to_original,
    load_detection_file,
    load_truths,
    match_detections,
    nms,
    original_to_letterbox,
    prediction_count,
    rescale_detections,
    sigmoid,
    write_detections,
    write_truths,
)
from weevilwatch.errors import DomainError, ValidationError

coord = st.floats(-500, 500, allow_nan=False)


@st.composite
def boxes(draw):
    x, y = draw(coord), draw(coord)
    w, h = draw(st.floats(0.01, 300)), draw(st.floats(0.01, 300))
    return BoundingBox(x, y, x + w, y + h)


def det(x1, y1, x2, y2, conf, cls="palm", image="img"):
    return Detection(BoundingBox(x1, y1, x2, y2), cls, conf, image)


def gt(x1, y1, x2, y2, cls="palm", image="img"):
    return GroundTruth(BoundingBox(x1, y1, x2, y2), cls, image)


# ---------------------------------------------------------------- basics

@pytest.mark.parametrize("coords", [(0, 0, 0, 1), (2, 0, 1, 1), (0, 0, float("nan"), 1)])
def test_box_rejects(coords):
    with pytest.raises(ValidationError):
        BoundingBox(*coords)


def test_detection_rejects_confidence():
    with pytest.raises(ValidationError):
        det(0, 0, 1, 1, 1.2)


def test_sigmoid_stable():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(-1000.0) == 0.0 and sigmoid(1000.0) == 1.0
    np.testing.assert_allclose(sigmoid(np.array([-2.0, 3.0])), 1 / (1 + np.exp([2.0, -3.0])))


@settings(max_examples=200)
@given(boxes(), boxes())
def test_iou_matches_oracle(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(box_iou(a.as_tuple(), b.as_tuple()), abs=1e-12)
    assert v == iou(b, a)


@given(boxes())
def test_iou_self(a):
    assert iou(a, a) == pytest.approx(1.0)


def test_iou_touching_edges():
    assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(1, 0, 2, 1)) == 0.0


# ---------------------------------------------------------------- alignment

def test_alignment_worked_value():
    assert alignment_score(0.5, 0.8, AlignmentParams(alpha=1.0, beta=6.0)) == pytest.approx(0.131072, abs=1e-12)


def test_alignment_zero_power():
    assert alignment_score(0.0, 0.7, AlignmentParams(alpha=0.0)) == pytest.approx(0.7 ** 6)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 5), st.floats(0, 8))
def test_alignment_monotone(s, u, d, alpha, beta):
    p = AlignmentParams(alpha, beta)
    base = alignment_score(s, u, p)
    assert 0.0 <= base <= 1.0
    assert alignment_score(min(1.0, s + d), u, p) >= base
    assert alignment_score(s, min(1.0, u + d), p) >= base


@pytest.mark.parametrize("s,u", [(-0.1, 0.5), (0.5, 1.1)])
def test_alignment_domain(s, u):
    with pytest.raises(DomainError):
        alignment_score(s, u, AlignmentParams())


@pytest.mark.parametrize("kw", [{"alpha": -1}, {"beta": float("inf")}, {"m": 0}, {"m": 2.5}])
def test_alignment_params_rejects(kw):
    with pytest.raises(ValidationError):
        AlignmentParams(**kw)


def test_assign_anchors_top_m_with_ties():
    cands = [(0.5, 0.5)] * 3 + [(0.9, 0.9), (0.1, 0.1)]
    pos, neg = assign_anchors(cands, AlignmentParams(m=2))
    assert pos == {3, 0} and neg == {1, 2, 4}
    pos, neg = assign_anchors(cands[:2], AlignmentParams(m=10))
    assert pos == {0, 1} and neg == set()


# ---------------------------------------------------------------- loss

def test_loss_perfect_floor():
    d = det(0, 0, 10, 10, 1.0)
    loss = composite_loss([(d, gt(0, 0, 10, 10))])
    assert loss.total <= 1e-9


def test_loss_single_pair_values():
    d = det(0, 0, 10, 10, 0.5)
    g = gt(0, 0, 10, 30)
    loss = composite_loss([(d, g)])
    assert loss.loc_loss == pytest.approx(2 / 3, abs=1e-12)
    assert loss.cls_loss == pytest.approx(math.log(2), abs=1e-12)
    assert loss.conf_loss == pytest.approx(math.log(2), abs=1e-12)


def test_loss_wrong_class_and_unmatched():
    d = Detection(BoundingBox(0, 0, 1, 1), "tree", 0.9, class_prob=0.25)
    spare = det(5, 5, 6, 6, 0.2)
    loss = composite_loss([(d, gt(0, 0, 1, 1))], [spare], [gt(9, 9, 10, 10)], weights=(1, 2, 3))
    assert loss.cls_loss == pytest.approx(-math.log(0.75))
    assert loss.loc_loss == pytest.approx(0.5)
    assert loss.conf_loss == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2)
    assert loss.total == pytest.approx(loss.cls_loss + 2 * loss.loc_loss + 3 * loss.conf_loss)


def test_loss_empty():
    assert composite_loss([]).empty


def test_loss_saturated_stays_finite():
    loss = composite_loss([(det(0, 0, 1, 1, 0.0), gt(0, 0, 1, 1))])
    assert math.isfinite(loss.total)


# ---------------------------------------------------------------- NMS

def test_nms_empty():
    assert nms([]) == []


def test_nms_all_below_threshold():
    assert nms([det(0, 0, 1, 1, 0.1), det(5, 5, 6, 6, 0.2)]) == []


def test_nms_identical_boxes_keep_first():
    a, b = det(0, 0, 10, 10, 0.8), det(0, 0, 10, 10, 0.8)
    kept = nms([a, b])
    assert len(kept) == 1 and kept[0] is a


def test_nms_class_aware():
    a, b = det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.8, cls="tree")
    assert nms([a, b]) == [a, b]


def test_nms_iou_exactly_at_threshold_survives():
    a = det(0, 0, 10, 10, 0.9)
    b = det(0, 0, 10, 5, 0.8)
    assert len(nms([a, b], iou_threshold=0.5)) == 2
    assert len(nms([a, b], iou_threshold=0.49)) == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_nms_matches_oracle(seed, conf_t, iou_t):
    dets = nms_instance(np.random.default_rng(seed))
    items = [(d.box.as_tuple(), d.class_id, d.confidence, d.image_id) for d in dets]
    expected = [dets[i] for i in nms_reference(items, conf_t, iou_t)]
    kept = nms(dets, conf_t, iou_t)
    assert [id(d) for d in kept] == [id(d) for d in expected]
    confs = [d.confidence for d in kept]
    assert confs == sorted(confs, reverse=True)


def test_nms_threshold_domain():
    with pytest.raises(DomainError):
        nms([], iou_threshold=1.5)


# ---------------------------------------------------------------- letterbox

def test_letterbox_worked_example():
    t = LetterboxTransform.fit(1000, 1000, 640)
    assert (t.scale, t.pad_x, t.pad_y) == (0.64, 0.0, 0.0)
    t = LetterboxTransform.fit(1000, 500, 640)
    assert (t.scale, t.pad_x, t.pad_y) == (0.64, 0.0, 160.0)
    b = letterbox_to_original(BoundingBox(0, 160, 320, 480), t)
    assert b.as_tuple() == (0.0, 0.0, 500.0, 500.0)
    t = LetterboxTransform.fit(4000, 3000, 1280)
    assert letterbox_to_original(BoundingBox(0, 160, 320, 480), t).as_tuple() == (0.0, 0.0, 1000.0, 1000.0)


@settings(max_examples=200)
@given(st.floats(10, 8000), st.floats(10, 8000), st.sampled_from([640, 1280]),
       st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.01, 0.1), st.floats(0.01, 0.1))
def test_letterbox_roundtrip(w, h, S, fx, fy, fw, fh):
    t = LetterboxTransform.fit(w, h, S)
    box = BoundingBox(fx * w, fy * h, (fx + fw) * w, (fy + fh) * h)
    back = letterbox_to_original(original_to_letterbox(box, t), t)
    for a, b in zip(back.as_tuple(), box.as_tuple()):
        assert a == pytest.approx(b, abs=1e-9 * max(w, h))


def test_letterbox_clamps_and_drops():
    t = LetterboxTransform.fit(1000, 500, 640)
    b = letterbox_to_original(BoundingBox(-10, 100, 50, 200), t)
    assert b.x1 == 0.0 and b.y1 == 0.0
    with pytest.raises(DroppedBox):
        letterbox_to_original(BoundingBox(0, 0, 100, 150), t)
    dets = [Detection(BoundingBox(0, 0, 100, 150), "palm", 0.9), Detection(BoundingBox(0, 200, 64, 264), "palm", 0.9)]
    assert len(rescale_detections(dets, t)) == 1


def test_letterbox_rejects_bad_size():
    with pytest.raises(DomainError):
        LetterboxTransform.fit(0, 10)


# ---------------------------------------------------------------- grids

def test_grid_scales():
    assert grid_scales(1280) == ((80, 80), (40, 40), (20, 20))
    assert grid_scales(640) == ((40, 40), (20, 20), (10, 10))
    assert prediction_count(1280) == 3 * (6400 + 1600 + 400)


@pytest.mark.parametrize("size", [1281, 0, -64, 100])
def test_grid_scales_rejects(size):
    with pytest.raises(DomainError):
        grid_scales(size)


# ---------------------------------------------------------------- AP / mAP

def test_ap_hand_fixture():
    truths = [gt(0, 0, 10, 10)]
    dets = [det(0, 0, 10, 2, 0.9), det(0, 0, 10, 9, 0.8)]
    report = evaluate_detections(dets, truths, [0.5])
    assert report.per_class["palm"].ap[0.5] == pytest.approx(0.5, abs=1e-12)


def test_ap_perfect_and_empty():
    assert average_precision([True, True], 2) == 1.0
    assert average_precision([], 3) == 0.0
    assert average_precision([True], 0) == 0.0


def test_match_prefers_best_iou():
    truths = [gt(0, 0, 10, 10), gt(0, 0, 10, 12)]
    order, matches = match_detections([det(0, 0, 10, 12, 0.9)], truths, 0.5)
    assert matches == [1]


def test_degenerate_class():
    report = evaluate_detections([det(0, 0, 1, 1, 0.9, cls="tree")], [gt(0, 0, 1, 1)])
    assert report.per_class["tree"].degenerate
    assert report.per_class["palm"].ap50 == 0.0
    assert report.map50 == 0.0


def test_no_truths_at_all():
    report = evaluate_detections([], [])
    assert report.map50 == 0.0 and report.precision == 0.0 and report.recall == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.3, 0.5, 0.75, 0.95]))
def test_ap_matches_bruteforce(seed, thr):
    dets, truths = ap_instance(np.random.default_rng(seed))
    report = evaluate_detections(dets, truths, [thr])
    expected = ap_bruteforce([(d.box.as_tuple(), d.image_id, d.confidence) for d in dets],
                             [(g.box.as_tuple(), g.image_id) for g in truths], thr)
    got = report.per_class["palm"].ap[thr] if "palm" in report.per_class else 0.0
    assert got == pytest.approx(expected, abs=1e-9)


def test_map_two_classes_average():
    truths = [gt(0, 0, 10, 10), gt(20, 20, 30, 30, cls="tree")]
    dets = [det(0, 0, 10, 10, 0.9), det(50, 50, 60, 60, 0.9, cls="tree")]
    r = evaluate_detections(dets, truths)
    assert r.map50 == pytest.approx(0.5)
    assert r.map50_95 == pytest.approx(0.5)
    assert r.precision == 0.5 and r.recall == 0.5
    assert set(r.to_dict()["per_class"]) == {"palm", "tree"}


def test_report_thresholds_default():
    assert MAP_IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


# ---------------------------------------------------------------- files

def test_detection_file_roundtrip(tmp_path):
    dets = [det(1.5, 2, 3, 4.25, 0.7), det(10, 10, 20, 20, 0.123456789, cls="tree", image="b")]
    write_detections(dets, tmp_path / "d.txt", space="network", original_size=(4000, 3000))
    f = load_detection_file(tmp_path / "d.txt")
    assert f.space == "network" and f.original_size == (4000.0, 3000.0)
    assert f.detections == dets


def test_detection_file_without_header(tmp_path):
    (tmp_path / "d.txt").write_text("# comment\nimg palm 0.5 0 0 1 1  # trailing\n\n")
    f = load_detection_file(tmp_path / "d.txt")
    assert f.space == "original" and len(f.detections) == 1


@pytest.mark.parametrize("body", [
    "space=pixels\n", "img palm 0.5 0 0 1\n", "img palm 1.5 0 0 1 1\n", "img palm 0.5 0 0 a 1\n",
    "img palm 0.5 2 0 1 1\n",
])
def test_detection_file_rejects(tmp_path, body):
    (tmp_path / "d.txt").write_text(body)
    with pytest.raises(ValidationError):
        load_detection_file(tmp_path / "d.txt")


def test_truth_file_roundtrip(tmp_path):
    truths = [gt(0, 0, 1, 1), gt(3, 3, 9, 9, cls="tree", image="x")]
    write_truths(truths, tmp_path / "t.txt")
    assert load_truths(tmp_path / "t.txt") == truths


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 0.75]))
def test_removing_false_positive_never_lowers_ap(seed, thr):
    dets, truths = ap_instance(np.random.default_rng(seed))
    order, matches = match_detections(dets, truths, thr)
    before = average_precision([m is not None for m in matches], len(truths))
    for i, m in zip(order, matches):
        if m is None:
            rest = dets[:i] + dets[i + 1:]
            _, m2 = match_detections(rest, truths, thr)
            assert average_precision([x is not None for x in m2], len(truths)) >= before - 1e-12
