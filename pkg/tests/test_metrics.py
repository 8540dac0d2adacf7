import numpy as np
import pytest

from errors import ValidationError
from metrics import (
    Annotation,
    Box,
    Detection,
    EmptyGroundTruth,
    EvalResult,
    InvalidBox,
    NoAnnotations,
    average_precision,
    evaluate,
    image_illuminance,
    iou,
    mean_average_precision,
    target_confidence,
)


def det(x1, y1, x2, y2, conf, cls=0):
    return Detection(Box(x1, y1, x2, y2), cls, conf)


def gt(x1, y1, x2, y2, cls=0, name=""):
    return Annotation(Box(x1, y1, x2, y2), cls, name)


def test_iou_examples():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(10, 0, 20, 10)) == 0.0
    assert iou(a, Box(5, 0, 15, 10)) == pytest.approx(1 / 3)
    assert iou(a, Box(5, 0, 15, 10)) == iou(Box(5, 0, 15, 10), a)


def test_degenerate_box_is_rejected():
    with pytest.raises(InvalidBox):
        Box(5, 5, 5, 10)


def test_average_precision_examples():
    g = [gt(0, 0, 10, 10)]
    assert average_precision([det(0, 0, 10, 10, 0.9)], g) == 1.0
    assert average_precision([], g) == 0.0
    # one hit out of two objects: half the recall at full precision
    two = [gt(0, 0, 10, 10), gt(20, 20, 30, 30)]
    assert average_precision([det(0, 0, 10, 10, 0.9)], two) == pytest.approx(0.5)
    # a false positive ranked above the hit halves the precision at that recall
    assert average_precision([det(50, 50, 60, 60, 0.95), det(0, 0, 10, 10, 0.9)], g) == pytest.approx(0.5)


def test_empty_ground_truth():
    with pytest.raises(EmptyGroundTruth):
        average_precision([det(0, 0, 1, 1, 0.5)], [])


def test_threshold_must_be_open_unit_interval():
    with pytest.raises(ValidationError):
        average_precision([], [gt(0, 0, 1, 1)], iou_thresh=1.0)


def test_map_perfect_and_empty():
    anns = [gt(0, 0, 10, 10, 0), gt(20, 20, 40, 40, 1)]
    dets = [det(0, 0, 10, 10, 0.8, 0), det(20, 20, 40, 40, 0.7, 1)]
    assert mean_average_precision([(dets, anns)]).map == 1.0
    assert mean_average_precision([([], anns)]).map == 0.0
    with pytest.raises(NoAnnotations):
        mean_average_precision([(dets, [])])


def test_map_leaves_out_classes_without_ground_truth():
    anns = [gt(0, 0, 10, 10, 0)]
    dets = [det(0, 0, 10, 10, 0.9, 0), det(50, 50, 60, 60, 0.9, 3)]
    result = mean_average_precision([(dets, anns)])
    assert set(result.per_class_ap) == {0}
    assert result.map == 1.0


def _oracle_ap(dets, gts, thresh):
    ranked = sorted(dets, key=lambda d: -d.confidence)
    used = [False] * len(gts)
    hits = []
    for d in ranked:
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if used[j]:
                continue
            o = iou(d.box, g.box)
            if o >= thresh and o > best_iou:
                best, best_iou = j, o
        if best is not None:
            used[best] = True
        hits.append(best is not None)
    precision, recall, tp = [], [], 0
    for k, h in enumerate(hits, 1):
        tp += h
        precision.append(tp / k)
        recall.append(tp / len(gts))
    total, prev = 0.0, 0.0
    for r in sorted(set(recall)):
        if r == 0:
            continue
        total += (r - prev) * max(p for p, rr in zip(precision, recall) if rr >= r)
        prev = r
    return total


def _random_instance(rng):
    def box():
        x, y = rng.uniform(0, 50, size=2)
        w, h = rng.uniform(5, 30, size=2)
        return x, y, x + w, y + h
    gts = [gt(*box(), cls=int(rng.integers(3))) for _ in range(rng.integers(1, 6))]
    dets = []
    for _ in range(rng.integers(0, 11)):
        if gts and rng.random() < 0.6:
            g = gts[rng.integers(len(gts))]
            jit = rng.normal(0, 2, size=4)
            b = g.box.as_list()
            x1, y1 = b[0] + jit[0], b[1] + jit[1]
            x2, y2 = max(b[2] + jit[2], x1 + 1), max(b[3] + jit[3], y1 + 1)
            dets.append(det(x1, y1, x2, y2, float(rng.random()), g.class_id))
        else:
            dets.append(det(*box(), float(rng.random()), int(rng.integers(3))))
    return dets, gts


def test_map_matches_brute_force_oracle():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        dets, gts = _random_instance(rng)
        result = mean_average_precision([(dets, gts)])
        expected = {}
        for c in {g.class_id for g in gts}:
            expected[c] = _oracle_ap([d for d in dets if d.class_id == c],
                                     [g for g in gts if g.class_id == c], 0.5)
        assert set(result.per_class_ap) == set(expected)
        for c, ap in expected.items():
            assert abs(result.per_class_ap[c] - ap) <= 1e-9
        assert abs(result.map - np.mean(list(expected.values()))) <= 1e-9


def test_adding_a_lowest_ranked_false_positive_never_raises_ap():
    rng = np.random.default_rng(11)
    for _ in range(200):
        dets, gts = _random_instance(rng)
        gts = [g for g in gts if g.class_id == 0] or [gt(0, 0, 10, 10, 0)]
        dets = [d for d in dets if d.class_id == 0]
        before = average_precision(dets, gts)
        after = average_precision(dets + [det(200, 200, 210, 210, 0.0)], gts)
        assert after <= before + 1e-12


def test_adding_a_top_ranked_true_positive_never_lowers_ap():
    rng = np.random.default_rng(13)
    for _ in range(200):
        dets, gts = _random_instance(rng)
        gts = [g for g in gts if g.class_id == 0] + [gt(300, 300, 320, 320, 0)]
        dets = [d for d in dets if d.class_id == 0]
        before = average_precision(dets, gts)
        after = average_precision([det(300, 300, 320, 320, 1.0)] + dets, gts)
        assert after >= before - 1e-12


def test_ap_is_invariant_to_coordinate_scaling():
    rng = np.random.default_rng(17)
    for _ in range(100):
        dets, gts = _random_instance(rng)

        def scaled(b):
            return Box(b.x1 * 4, b.y1 * 4, b.x2 * 4, b.y2 * 4)
        a = mean_average_precision([(dets, gts)]).map
        b = mean_average_precision([([Detection(scaled(d.box), d.class_id, d.confidence) for d in dets],
                                     [Annotation(scaled(g.box), g.class_id) for g in gts])]).map
        assert a == pytest.approx(b, abs=1e-9)


def test_target_confidence():
    target = Box(0, 0, 10, 10)
    dets = [det(0, 0, 10, 10, 0.4), det(1, 0, 10, 10, 0.7), det(0, 0, 10, 10, 0.9, cls=2),
            det(40, 40, 50, 50, 0.99)]
    assert target_confidence(dets, 0, target) == 0.7
    assert target_confidence([], 0, target) == 0.0


def test_evaluate_reports_named_objects():
    anns = [gt(0, 0, 10, 10, 0, "cup"), gt(20, 20, 30, 30, 1, "bottle")]
    result = evaluate([det(0, 0, 10, 10, 0.8, 0)], anns, object_ids={"cup": 0, "bottle": 1})
    assert result.per_object_confidence == {"cup": 0.8, "bottle": 0.0}
    assert result.map == pytest.approx(0.5)
    assert EvalResult.from_dict(result.to_dict()) == result


def test_illuminance():
    assert image_illuminance(np.zeros((4, 4, 3))) == 0.0
    assert image_illuminance(np.ones((4, 4, 3))) == pytest.approx(255.0)
    assert image_illuminance(np.full((4, 4, 3), 0.5), scale=100.0) == pytest.approx(50.0)
