import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decoupled_distill.evaluation import evaluate, pr_curve, write_eval
from decoupled_distill.geometry import BBox, DetectionSet

# Three images, two classes. Hand enumeration at IoU 0.5:
# class 0 ranked p1 TP, p2 FP, p3 TP over 2 GT -> recall .5,.5,1 precision 1,.5,2/3
#   envelope area = .5*1 + .5*(2/3) = 5/6
# class 1 ranked p5 FP, p4 TP over 2 GT (one never found) -> .5 * .5 = 1/4
# mAP = (5/6 + 1/4) / 2 = 13/24
AP0, AP1, MAP = 5 / 6, 1 / 4, 13 / 24

GT = [
    DetectionSet("A", [BBox(0.25, 0.25, 0.2, 0.2, 0), BBox(0.7, 0.7, 0.2, 0.2, 1)]),
    DetectionSet("B", [BBox(0.5, 0.5, 0.3, 0.3, 0)]),
    DetectionSet("C", [BBox(0.5, 0.5, 0.4, 0.4, 1)]),
]
PRED = [
    DetectionSet("A", [BBox(0.25, 0.25, 0.2, 0.2, 0, 0.9), BBox(0.2, 0.8, 0.1, 0.1, 1, 0.95)]),
    DetectionSet("B", [BBox(0.85, 0.15, 0.1, 0.1, 0, 0.8), BBox(0.5, 0.5, 0.3, 0.3, 0, 0.6)]),
    DetectionSet("C", [BBox(0.5, 0.5, 0.4, 0.4, 1, 0.7)]),
]


def test_fixture_constants():
    r = evaluate(PRED, GT)
    assert r.ap[0] == pytest.approx(AP0, abs=1e-12)
    assert r.ap[1] == pytest.approx(AP1, abs=1e-12)
    assert r.map50 == pytest.approx(MAP, abs=1e-12)
    assert r.counts[0] == {"tp": 2, "fp": 1, "fn": 0, "gt": 2}
    assert r.counts[1] == {"tp": 1, "fp": 1, "fn": 1, "gt": 2}
    assert pr_curve(r, 1) == [(0.0, 0.0), (0.5, 0.5)]


def test_perfect_and_empty():
    assert evaluate(GT, GT).map50 == 1.0
    empty = [DetectionSet(s.image_id, []) for s in GT]
    assert evaluate(empty, GT).map50 == 0.0


def test_duplicate_detection_is_false_positive():
    gt = [DetectionSet("x", [BBox(0.5, 0.5, 0.2, 0.2)])]
    pred = [DetectionSet("x", [BBox(0.5, 0.5, 0.2, 0.2, 0, 0.9), BBox(0.5, 0.5, 0.2, 0.2, 0, 0.8)])]
    r = evaluate(pred, gt)
    assert r.counts[0]["fp"] == 1 and r.ap[0] == 1.0


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        evaluate(PRED, GT + [DetectionSet("A", [])])


def test_class_without_ground_truth_excluded():
    pred = PRED + [DetectionSet("D", [BBox(0.5, 0.5, 0.1, 0.1, 5, 0.99)])]
    r = evaluate(pred, GT + [DetectionSet("D", [])])
    assert 5 not in r.ap and r.counts[5]["fp"] == 1
    assert r.map50 == pytest.approx(MAP, abs=1e-12)


def test_write_eval(tmp_path):
    write_eval(evaluate(PRED, GT), tmp_path)
    assert (tmp_path / "eval.json").exists()
    assert (tmp_path / "pr_0.csv").read_text().splitlines()[0] == "recall,precision"


def _random_sets(rng, n_img, n_box):
    out = []
    for i in range(n_img):
        out.append(DetectionSet(str(i), [BBox(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.3, 2),
                                              int(rng.integers(2)), float(rng.random()))
                                         for _ in range(n_box)]))
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_invariances(seed):
    rng = np.random.default_rng(seed)
    gt = _random_sets(rng, 4, 3)
    pred = _random_sets(rng, 4, 4)
    base = evaluate(pred, gt).map50
    assert 0.0 <= base <= 1.0
    # image order does not matter
    assert evaluate(pred[::-1], gt[::-1]).map50 == pytest.approx(base, abs=1e-12)
    # any monotone rescaling of scores keeps the ranking
    scaled = [DetectionSet(s.image_id, [BBox(b.cx, b.cy, b.w, b.h, b.class_id, b.score ** 3 / 2)
                                        for b in s]) for s in pred]
    assert evaluate(scaled, gt).map50 == pytest.approx(base, abs=1e-12)
    # horizontal mirror of everything
    flip = lambda sets: [DetectionSet(s.image_id, [b.flipped() for b in s]) for s in sets]
    assert evaluate(flip(pred), flip(gt)).map50 == pytest.approx(base, abs=1e-12)
