import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decoupled_distill.detector import build_adaptation, build_model, predict_features
from decoupled_distill.geometry import BBox, DetectionSet, iou
from decoupled_distill.pipeline import (TrainConfig, aggregate, check_class_maps, decoupled_run,
                                        distill_stage, init_adaptation_bias, pseudo_label, subsample,
                                        train_supervised, write_run)
from decoupled_distill.synthdata import AccessAudit, SceneConfig, gen_dataset


# ---------------------------------------------------------------- aggregation

def _oracle(teacher_dets, mode, thr):
    """Explicit-loop reference: a detection survives if enough distinct teachers
    (counting its own) report a same-class box at IoU >= thr; survivors are then
    visited by score and each absorbs agreeing survivors from other teachers."""
    items = [(t, i, b) for t, d in enumerate(teacher_dets) for i, b in enumerate(d.boxes)]
    if mode == "affirmative":
        return sorted((b for _, _, b in items), key=lambda b: -b.score)
    need = len(teacher_dets) if mode == "unanimous" else len(teacher_dets) // 2 + 1

    def agrees(x, y):
        return x[2].class_id == y[2].class_id and iou(x[2], y[2]) >= thr - 1e-12

    supported = [x for x in items if len({y[0] for y in items if agrees(x, y)}) >= need]
    supported.sort(key=lambda x: (-x[2].score, x[2].class_id, items.index(x)))
    out, gone = [], set()
    for x in supported:
        if (x[0], x[1]) in gone:
            continue
        out.append(x[2])
        for y in supported:
            if y[0] != x[0] and agrees(x, y):
                gone.add((y[0], y[1]))
    return out


def _random_teachers(rng, n_teachers=3):
    anchors = rng.uniform(0.25, 0.75, size=(3, 2))
    sets = []
    for t in range(n_teachers):
        boxes = []
        for _ in range(rng.integers(0, 5)):
            c = anchors[rng.integers(3)] + rng.normal(0, 0.03, 2)
            boxes.append(BBox(float(c[0]), float(c[1]), float(rng.uniform(0.15, 0.25)),
                              float(rng.uniform(0.15, 0.25)), int(rng.integers(2)),
                              float(np.round(rng.random(), 3))))
        sets.append(DetectionSet("img", boxes))
    return sets


@pytest.mark.parametrize("mode", ["consensus", "unanimous", "affirmative"])
def test_aggregate_matches_oracle(mode):
    rng = np.random.default_rng(11)
    for _ in range(100):
        dets = _random_teachers(rng)
        got = aggregate(dets, mode, 0.5).boxes
        want = _oracle(dets, mode, 0.5)
        assert sorted(got, key=repr) == sorted(want, key=repr)
        assert [b.score for b in got] == sorted((b.score for b in got), reverse=True)


def test_aggregate_mode_nesting():
    rng = np.random.default_rng(3)
    for _ in range(50):
        dets = _random_teachers(rng)
        aff = set(aggregate(dets, "affirmative").boxes)
        con = set(aggregate(dets, "consensus").boxes)
        una = set(aggregate(dets, "unanimous").boxes)
        assert una <= aff and con <= aff
        assert len(una) <= len(con)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["affirmative", "consensus", "unanimous"]))
def test_single_teacher_identity(seed, mode):
    dets = _random_teachers(np.random.default_rng(seed), 1)
    got = aggregate(dets, mode).boxes
    assert sorted(got, key=repr) == sorted(dets[0].boxes, key=repr)


def test_disjoint_classes_affirmative_is_union():
    a = DetectionSet("x", [BBox(0.3, 0.3, 0.2, 0.2, 0, 0.9)])
    b = DetectionSet("x", [BBox(0.3, 0.3, 0.2, 0.2, 1, 0.8)])
    assert aggregate([a, b], "affirmative").boxes == a.boxes + b.boxes
    assert aggregate([a, b], "unanimous").boxes == []


def test_aggregate_rejects_bad_mode():
    with pytest.raises(ValueError):
        aggregate([DetectionSet("x")], "vote")
    with pytest.raises(ValueError):
        aggregate([], "affirmative")


def test_class_map_checks():
    teachers = [build_model("student", 1), build_model("student", 1)]
    check_class_maps([{0: 0}, {0: 1}], teachers)
    with pytest.raises(ValueError):
        check_class_maps([{0: 0}, {1: 1}], teachers)
    with pytest.raises(ValueError):
        check_class_maps([{0: 0, 1: 0}], [build_model("student", 2)])


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def tiny():
    cfg = SceneConfig(seed=1)
    return (gen_dataset(cfg, 24, True, "labeled"), gen_dataset(cfg, 16, True, "val"),
            gen_dataset(cfg, 24, False, "unlabeled"))


def test_label_fraction_arithmetic(tiny):
    lab = tiny[0]
    assert len(subsample(lab, 0.25, 0)) == 6
    assert len(subsample(lab, 1.0, 0)) == 24
    assert subsample(lab, 0.5, 3).ids == subsample(lab, 0.5, 3).ids
    with pytest.raises(ValueError):
        subsample(lab, 0.01, 0)
    with pytest.raises(ValueError):
        TrainConfig(label_fraction=1.5)


def test_zero_learning_rate_leaves_weights(tiny):
    m = build_model("student", 2, seed=0)
    before = m.state()
    train_supervised(m, tiny[0], TrainConfig(epochs=1, lr=0.0, batch_size=8))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, m.params))


def test_training_reduces_loss(tiny):
    m = build_model("student", 2, seed=0)
    _, rec = train_supervised(m, tiny[0], TrainConfig(epochs=6, lr=5e-3, batch_size=8))
    first, last = rec.epochs[0], rec.epochs[-1]
    assert last["L_conf"] + last["L_box"] < first["L_conf"] + first["L_box"]


def test_supervised_rejects_unlabeled(tiny):
    with pytest.raises(ValueError):
        train_supervised(build_model("student", 2), tiny[2], TrainConfig(epochs=1))


def test_distill_rejects_ground_truth(tiny):
    with pytest.raises(ValueError, match="pseudo"):
        distill_stage(build_model("student", 2), None, None, tiny[0],
                      TrainConfig(epochs=1, use_feature_term=False))


def _run(tiny, audit=None, feature=True):
    teacher = build_model("teacher", 2, seed=4)
    teacher.params[-1].data[4::7] = 2.0  # make the untrained teacher emit boxes
    ud = TrainConfig(epochs=2, batch_size=8, use_feature_term=feature, score_thresh=0.05)
    ft = TrainConfig(epochs=2, batch_size=8)
    lab, val, unl = tiny
    for ds in tiny:
        ds.audit = audit
    try:
        return decoupled_run(teacher, unl, lab, ud, ft, 0, val, audit)
    finally:
        for ds in tiny:
            ds.audit = None


def test_no_ground_truth_read_during_distillation(tiny):
    audit = AccessAudit()
    _, rec = _run(tiny, audit)
    assert len(rec.epochs) == 4 and rec.epochs[0]["L_F"] is not None
    assert audit.gt_reads("UD") == []
    assert audit.gt_reads("pseudo-label") == []
    assert audit.gt_reads("FT") and audit.gt_reads("eval")


def test_runs_are_deterministic(tiny, tmp_path):
    for name in ("a", "b"):
        student, rec = _run(tiny)
        write_run(tmp_path / name, rec, student)
    a = (tmp_path / "a" / "metrics.csv").read_text()
    assert a == (tmp_path / "b" / "metrics.csv").read_text()
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()
    rows = list(csv.DictReader(a.splitlines()))
    assert {r["stage"] for r in rows} == {"UD", "FT"}


def test_feature_flag_recorded(tiny):
    _, rec = _run(tiny, feature=False)
    assert rec.notes["feature_term"] is False
    assert all(r["L_F"] is None for r in rec.epochs)


def test_pseudo_labels_drop_empty_images(tiny):
    silent = build_model("teacher", 2, seed=4)
    assert len(pseudo_label(silent, tiny[2], TrainConfig(score_thresh=0.99))) == 0


def test_adaptation_bias_is_masked_teacher_mean(tiny):
    teacher = build_model("teacher", 2, seed=4)
    teacher.params[-1].data[4::7] = 2.0
    audit = AccessAudit()
    tiny[2].audit = audit
    try:
        ps = pseudo_label(teacher, tiny[2], TrainConfig(score_thresh=0.05))
    finally:
        tiny[2].audit = None
    ps.audit = audit
    a = build_adaptation(8, teacher.feature_channels, 0)
    with audit.stage("UD"):
        bias = init_adaptation_bias(a, teacher, ps)
    ps.audit = None
    assert audit.gt_reads() == []
    feats, _ = predict_features(teacher, ps.batch(range(len(ps))))
    cells = []
    for i, boxes in enumerate(ps.annotations()):
        for r in range(teacher.k):
            for c in range(teacher.k):
                x, y = (c + 0.5) / teacher.k, (r + 0.5) / teacher.k
                if any(b.corners()[0] <= x <= b.corners()[2] and b.corners()[1] <= y <= b.corners()[3] for b in boxes):
                    cells.append(feats[i, :, r, c])
    np.testing.assert_allclose(bias, np.mean(cells, axis=0), rtol=1e-12)
