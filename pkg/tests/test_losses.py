import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decoupled_distill import numcore as nc
from decoupled_distill.geometry import BBox, decode_raw, iou, logit
from decoupled_distill.losses import (box_loss, build_grid_target, class_loss, conf_loss,
                                      feature_matching_loss, gt_loss, ignore_update, kd_loss,
                                      stack_targets)
from decoupled_distill.numcore import InvalidInputError, Tensor

from gradcheck import check_gradients

ANCHORS = ((0.15, 0.15), (0.45, 0.45))
K, B, NC = 4, 2, 2


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def sce(t, z):
    return -t * math.log(sig(z)) - (1 - t) * math.log(1 - sig(z)) if abs(z) < 30 else max(z, 0) - t * z + math.log1p(math.exp(-abs(z)))


def scene(rng, n=None):
    boxes = []
    for _ in range(int(rng.integers(0, 5)) if n is None else n):
        w, h = rng.uniform(0.05, 0.6, 2)
        boxes.append(BBox(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h,
                          int(rng.integers(NC)), 1.0))
    return boxes


def batch(rng, n=2, k=K):
    scenes = [scene(rng) for _ in range(n)]
    t = stack_targets([build_grid_target(s, k, B, ANCHORS, NC) for s in scenes])
    raw = rng.normal(scale=2.0, size=(n, k, k, B, 5 + NC))
    t = ignore_update(t, raw, scenes, 0.5)
    return scenes, t, raw


# ---------------------------------------------------------------- masks

def test_grid_target_empty():
    t = build_grid_target([], K, B, ANCHORS, NC)
    for arr in (t.assign_mask, t.feat_mask, t.xy, t.wh, t.class_onehot):
        assert not arr.any()


def test_feat_mask_full_image_box():
    t = build_grid_target([BBox(0.5, 0.5, 1.0, 1.0)], 8, B, ANCHORS, 1)
    assert t.feat_mask.all()


def test_feat_mask_point_in_box_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        boxes = scene(rng, 3)
        t = build_grid_target(boxes, 8, B, ANCHORS, NC)
        expected = np.zeros((8, 8))
        for r in range(8):
            for c in range(8):
                px, py = (c + 0.5) / 8, (r + 0.5) / 8
                for b in boxes:
                    if b.cx - b.w / 2 <= px <= b.cx + b.w / 2 and b.cy - b.h / 2 <= py <= b.cy + b.h / 2:
                        expected[r, c] = 1
        np.testing.assert_array_equal(t.feat_mask, expected)
        # targets only where assigned, ignore covers assigned slots
        assert not t.xy[t.assign_mask == 0].any()
        assert (t.ignore_mask[t.assign_mask == 1] == 1).all()


def test_ignore_update_no_boxes_all_ones():
    t = build_grid_target([], K, B, ANCHORS, NC)
    raw = np.random.default_rng(1).normal(size=(K, K, B, 5 + NC))
    assert ignore_update(t, raw, [], 0.5).ignore_mask.all()


def test_ignore_update_prediction_on_teacher_box():
    box = BBox(0.3, 0.3, 0.2, 0.2)
    t = build_grid_target([box], K, B, ANCHORS, NC)
    raw = np.full((K, K, B, 5 + NC), -10.0)
    # slot (1, 1, 1) is unassigned (box goes to slot 0); make it predict the box exactly
    raw[1, 1, 1, 0:2] = logit([0.3 * K - 1, 0.3 * K - 1])
    raw[1, 1, 1, 2:4] = logit([0.2, 0.2])
    assert t.assign_mask[1, 1, 1] == 0
    out = ignore_update(t, raw, [box], 0.5)
    assert out.ignore_mask[1, 1, 1] == 0
    assert out.ignore_mask[1, 1, 0] == 1


def test_ignore_update_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        boxes = scene(rng, 3)
        t = build_grid_target(boxes, K, B, ANCHORS, NC)
        raw = rng.normal(size=(K, K, B, 5 + NC))
        got = ignore_update(t, raw, boxes, 0.5).ignore_mask
        pred, _, _ = decode_raw(raw)
        for r in range(K):
            for c in range(K):
                for s in range(B):
                    if t.assign_mask[r, c, s]:
                        exp = 1
                    else:
                        p = BBox(*pred[r, c, s])
                        best = max((iou(p, b) for b in boxes), default=0.0)
                        exp = 1 if best < 0.5 else 0
                    assert got[r, c, s] == exp


# ---------------------------------------------------------------- feature matching

def test_feature_loss_zero_when_equal():
    f = np.random.default_rng(3).normal(size=(2, 4, K, K))
    assert feature_matching_loss(f, Tensor(f.copy()), np.ones((2, K, K))).item() == 0.0


def test_feature_loss_zero_mask():
    rng = np.random.default_rng(4)
    out = feature_matching_loss(rng.normal(size=(2, 4, K, K)), Tensor(rng.normal(size=(2, 4, K, K))),
                                np.zeros((2, K, K)))
    assert out.item() == 0.0


def test_feature_loss_loop_oracle():
    rng = np.random.default_rng(5)
    ft, fs = rng.normal(size=(2, 3, K, K)), rng.normal(size=(2, 3, K, K))
    mask = (rng.random((2, K, K)) < 0.5).astype(float)
    total = 0.0
    for n in range(2):
        for c in range(3):
            for i in range(K):
                for j in range(K):
                    total += (ft[n, c, i, j] * mask[n, i, j] - fs[n, c, i, j] * mask[n, i, j]) ** 2
    assert feature_matching_loss(ft, Tensor(fs), mask).item() == pytest.approx(total / 2, abs=1e-10)


def test_feature_loss_masked_cells_contribute_nothing():
    rng = np.random.default_rng(6)
    ft, fs = rng.normal(size=(1, 3, K, K)), rng.normal(size=(1, 3, K, K))
    mask = np.zeros((1, K, K))
    mask[0, 1, 2] = 0.7
    base = feature_matching_loss(ft, Tensor(fs), mask).item()
    fs2 = fs.copy()
    fs2[0, :, 0, 0] += 100.0
    assert feature_matching_loss(ft, Tensor(fs2), mask).item() == base


def test_feature_loss_shape_mismatch():
    with pytest.raises(InvalidInputError):
        feature_matching_loss(np.zeros((1, 3, K, K)), Tensor(np.zeros((1, 4, K, K))), np.ones((1, K, K)))


# ---------------------------------------------------------------- prediction terms

def oracle_terms(raw, t):
    n = raw.shape[0]
    box = conf = cls = 0.0
    for b in range(n):
        for i in range(K):
            for j in range(K):
                for s in range(B):
                    m = t.assign_mask[b, i, j, s]
                    z = raw[b, i, j, s]
                    if m:
                        box += (sig(z[0]) - t.xy[b, i, j, s, 0]) ** 2 + (sig(z[1]) - t.xy[b, i, j, s, 1]) ** 2
                        box += (sig(z[2]) - t.wh[b, i, j, s, 0]) ** 2 + (sig(z[3]) - t.wh[b, i, j, s, 1]) ** 2
                        for c in range(NC):
                            cls += sce(t.class_onehot[b, i, j, s, c], z[5 + c])
                    conf += (m + (1 - m) * t.ignore_mask[b, i, j, s]) * sce(m, z[4])
    return box / n, conf / n, cls / n


@pytest.mark.parametrize("seed", range(10))
def test_prediction_terms_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    _, t, raw = batch(rng)
    ob, oc, ocl = oracle_terms(raw, t)
    assert box_loss(Tensor(raw), t).item() == pytest.approx(ob, abs=1e-10)
    assert conf_loss(Tensor(raw), t).item() == pytest.approx(oc, abs=1e-10)
    assert class_loss(Tensor(raw), t).item() == pytest.approx(ocl, abs=1e-10)
    gt = gt_loss(Tensor(raw), t).item()
    assert gt == pytest.approx(ob + oc + ocl, abs=1e-10)


def test_box_loss_zero_cases():
    rng = np.random.default_rng(8)
    boxes = scene(rng, 3)
    t = stack_targets([build_grid_target(boxes, K, B, ANCHORS, NC)])
    raw = rng.normal(size=(1, K, K, B, 5 + NC))
    empty = stack_targets([build_grid_target([], K, B, ANCHORS, NC)])
    assert box_loss(Tensor(raw), empty).item() == 0.0
    m = t.assign_mask[0] > 0
    raw[0][m, 0:2] = logit(np.clip(t.xy[0][m], 1e-12, 1 - 1e-12))
    raw[0][m, 2:4] = logit(t.wh[0][m])
    assert box_loss(Tensor(raw), t).item() < 1e-20


def test_conf_loss_saturated_and_ignored_slots():
    t = stack_targets([build_grid_target([BBox(0.3, 0.3, 0.1, 0.1)], K, B, ANCHORS, NC)])
    raw = np.zeros((1, K, K, B, 5 + NC))
    raw[..., 4] = -1000.0
    raw[0, 1, 1, 0, 4] = 20.0
    assert conf_loss(Tensor(raw), t).item() == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
    assert math.log1p(math.exp(-20)) == pytest.approx(2.06e-9, rel=1e-2)
    # an unassigned slot with ignore 0 adds nothing, whatever its logit
    t.ignore_mask[0, 3, 3, 1] = 0.0
    raw[0, 3, 3, 1, 4] = 50.0
    assert conf_loss(Tensor(raw), t).item() == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)


def test_class_loss_unassigned_zero_and_saturated():
    t = stack_targets([build_grid_target([BBox(0.3, 0.3, 0.1, 0.1, 1)], K, B, ANCHORS, NC)])
    raw = np.random.default_rng(9).normal(size=(1, K, K, B, 5 + NC))
    raw[0, 1, 1, 0, 5:] = [-20.0, 20.0]
    assert class_loss(Tensor(raw), t).item() == pytest.approx(2 * math.log1p(math.exp(-20)), rel=1e-9)


def test_kd_loss_composition():
    rng = np.random.default_rng(10)
    scenes, t, raw = batch(rng)
    ft, fs = rng.normal(size=(2, 3, K, K)), rng.normal(size=(2, 3, K, K))
    t.feat_mask = np.stack([build_grid_target(s, K, B, ANCHORS, NC).feat_mask for s in scenes])
    off = kd_loss(ft, Tensor(fs), Tensor(raw), t, use_feature_term=False).item()
    on = kd_loss(ft, Tensor(fs), Tensor(raw), t, use_feature_term=True).item()
    parts = (feature_matching_loss(ft, Tensor(fs), t.feat_mask).item() + box_loss(Tensor(raw), t).item()
             + conf_loss(Tensor(raw), t).item() + class_loss(Tensor(raw), t).item())
    assert on == pytest.approx(parts, abs=1e-12)
    assert off == pytest.approx(parts - feature_matching_loss(ft, Tensor(fs), t.feat_mask).item(), abs=1e-12)


def test_kd_without_features_equals_gt_loss_bitwise():
    rng = np.random.default_rng(11)
    _, t, raw = batch(rng, n=3)
    a = kd_loss(None, None, Tensor(raw), t, use_feature_term=False).data
    b = gt_loss(Tensor(raw), t).data
    assert a.tobytes() == b.tobytes()


def test_gt_loss_zero_at_exact_fit():
    boxes = [BBox(0.3, 0.3, 0.1, 0.12, 0), BBox(0.7, 0.6, 0.4, 0.3, 1)]
    t = stack_targets([build_grid_target(boxes, K, B, ANCHORS, NC)])
    raw = np.zeros((1, K, K, B, 5 + NC))
    raw[..., 4] = -40.0
    m = t.assign_mask[0] > 0
    raw[0][m, 0:2] = logit(t.xy[0][m])
    raw[0][m, 2:4] = logit(t.wh[0][m])
    raw[0][m, 4] = 40.0
    raw[0][m, 5:] = np.where(t.class_onehot[0][m] > 0, 40.0, -40.0)
    assert 0.0 <= gt_loss(Tensor(raw), t).item() < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    _, t, raw = batch(rng)
    ft, fs = rng.normal(size=(2, 3, K, K)), rng.normal(size=(2, 3, K, K))
    for v in (box_loss(Tensor(raw), t), conf_loss(Tensor(raw), t), class_loss(Tensor(raw), t),
              feature_matching_loss(ft, Tensor(fs), t.feat_mask)):
        assert v.item() >= 0.0


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    scenes, t, raw = batch(rng, k=2)
    t.feat_mask = np.stack([build_grid_target(s, 2, B, ANCHORS, NC).feat_mask for s in scenes])
    ft = rng.normal(size=(2, 3, 2, 2))
    fs = rng.normal(size=(2, 3, 2, 2))
    check_gradients(lambda r: box_loss(r, t), raw)
    check_gradients(lambda r: conf_loss(r, t), raw)
    check_gradients(lambda r: class_loss(r, t), raw)
    check_gradients(lambda r: gt_loss(r, t), raw)
    check_gradients(lambda f: feature_matching_loss(ft, f, t.feat_mask), fs)
    check_gradients(lambda f, r: kd_loss(ft, f, r, t, True), fs, raw)
