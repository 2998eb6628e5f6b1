"""Distillation and ground-truth detection losses.

All losses take head logits shaped ``[N, K, K, B, 5 + Nc]`` and a batched
:class:`GridTarget`, and return a scalar :class:`Tensor` averaged over the
batch. A target built from teacher detections gives the distillation terms;
the same builder fed ground-truth boxes gives the fine-tuning loss.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numcore as nc
from .geometry import DEFAULT_ANCHORS, BBox, GridTarget, boxes_to_array, decode_raw, encode_targets, iou_matrix
from .numcore import InvalidInputError, Tensor

__all__ = [
    "GridTarget", "build_grid_target", "stack_targets", "ignore_update",
    "feature_matching_loss", "box_loss", "conf_loss", "class_loss",
    "prediction_terms", "kd_loss", "gt_loss",
]


def feature_mask(boxes: Sequence[BBox], k: int) -> np.ndarray:
    """1 for every cell whose center point lies inside some box."""
    centers = (np.arange(k) + 0.5) / k
    mask = np.zeros((k, k))
    for b in boxes:
        x0, y0, x1, y1 = b.corners()
        inside_x = (centers >= x0) & (centers <= x1)
        inside_y = (centers >= y0) & (centers <= y1)
        mask[np.ix_(inside_y, inside_x)] = 1.0
    return mask


def build_grid_target(boxes: Sequence[BBox], k: int, b: int, anchors=DEFAULT_ANCHORS,
                      num_classes: int = 1) -> GridTarget:
    boxes = list(boxes)
    t = encode_targets(boxes, k, b, anchors, num_classes)
    t.feat_mask = feature_mask(boxes, k)
    return t


def stack_targets(targets: Sequence[GridTarget]) -> GridTarget:
    return GridTarget(*(np.stack([getattr(t, f) for t in targets]) for f in
                        ("assign_mask", "xy", "wh", "class_onehot", "ignore_mask", "feat_mask")))


def ignore_update(t: GridTarget, student_raw, boxes, thresh: float = 0.5) -> GridTarget:
    """Recompute the no-object weighting from the student's current boxes.

    For unassigned slots the mask is 1 (penalize) when the decoded student box
    overlaps every source box by less than ``thresh`` and 0 otherwise.
    Assigned slots keep 1. Works on a single target or a batch.
    """
    raw = student_raw.data if isinstance(student_raw, Tensor) else np.asarray(student_raw)
    batched = t.assign_mask.ndim == 4
    if not batched:
        raw, boxes = raw[None], [boxes]
    m = t.assign_mask if batched else t.assign_mask[None]
    ign = np.ones_like(m)
    for n in range(raw.shape[0]):
        src = boxes_to_array(list(boxes[n]))
        if len(src) == 0:
            continue
        pred, _, _ = decode_raw(raw[n])
        best = iou_matrix(pred.reshape(-1, 4), src).max(axis=1).reshape(m.shape[1:])
        ign[n] = np.where(best < thresh, 1.0, 0.0)
    ign = np.where(m > 0, 1.0, ign)
    new = GridTarget(t.assign_mask, t.xy, t.wh, t.class_onehot, ign if batched else ign[0], t.feat_mask)
    return new


def _check(raw: Tensor, t: GridTarget):
    if raw.data.ndim != 5 or raw.shape[:4] != t.assign_mask.shape:
        raise InvalidInputError(f"logits {raw.shape} do not match target grid {t.assign_mask.shape}")
    if raw.shape[4] != 5 + t.class_onehot.shape[-1]:
        raise InvalidInputError("logit slot size does not match class count")


def feature_matching_loss(f_teacher, f_student: Tensor, feat_mask) -> Tensor:
    ft = f_teacher.data if isinstance(f_teacher, Tensor) else np.asarray(f_teacher, dtype=np.float64)
    if ft.shape != f_student.shape:
        raise InvalidInputError(f"feature shapes differ: {ft.shape} vs {f_student.shape}")
    mask = np.asarray(feat_mask, dtype=np.float64)
    if mask.shape != (ft.shape[0],) + ft.shape[2:]:
        raise InvalidInputError(f"mask {mask.shape} does not match features {ft.shape}")
    mask = np.broadcast_to(mask[:, None], ft.shape)
    masked_t = ft * mask
    diff = nc.sub(masked_t, nc.mul(f_student, mask))
    return nc.scale(nc.sum(nc.square(diff)), 1.0 / ft.shape[0])


def box_loss(student_raw: Tensor, t: GridTarget) -> Tensor:
    _check(student_raw, t)
    n = student_raw.shape[0]
    pred = nc.sigmoid(student_raw[..., 0:4])
    target = np.concatenate([t.xy, t.wh], axis=-1)
    mask = np.broadcast_to(t.assign_mask[..., None], target.shape)
    err = nc.square(nc.sub(pred, target))
    return nc.scale(nc.sum(nc.mul(err, mask)), 1.0 / n)


def conf_loss(student_raw: Tensor, t: GridTarget) -> Tensor:
    _check(student_raw, t)
    n = student_raw.shape[0]
    m = t.assign_mask
    weight = m + (1.0 - m) * t.ignore_mask
    ce = nc.sigmoid_cross_entropy(m, student_raw[..., 4])
    return nc.scale(nc.sum(nc.mul(ce, weight)), 1.0 / n)


def class_loss(student_raw: Tensor, t: GridTarget) -> Tensor:
    _check(student_raw, t)
    n = student_raw.shape[0]
    ce = nc.sigmoid_cross_entropy(t.class_onehot, student_raw[..., 5:])
    mask = np.broadcast_to(t.assign_mask[..., None], ce.shape)
    return nc.scale(nc.sum(nc.mul(ce, mask)), 1.0 / n)


def prediction_terms(student_raw: Tensor, t: GridTarget) -> dict[str, Tensor]:
    return {"box": box_loss(student_raw, t), "conf": conf_loss(student_raw, t),
            "class": class_loss(student_raw, t)}


def _combine(terms: dict[str, Tensor], weights: dict[str, float] | None) -> Tensor:
    total = None
    for name, value in terms.items():
        w = 1.0 if weights is None else weights.get(name, 1.0)
        term = value if w == 1.0 else nc.scale(value, w)
        total = term if total is None else nc.add(total, term)
    return total


def kd_loss(f_teacher, f_student_adapted, student_raw: Tensor, t: GridTarget,
            use_feature_term: bool = True, weights: dict[str, float] | None = None,
            return_terms: bool = False):
    terms = {}
    if use_feature_term:
        terms["feature"] = feature_matching_loss(f_teacher, f_student_adapted, t.feat_mask)
    terms.update(prediction_terms(student_raw, t))
    total = _combine(terms, weights)
    return (total, terms) if return_terms else total


def gt_loss(student_raw: Tensor, t: GridTarget, weights: dict[str, float] | None = None,
            return_terms: bool = False):
    terms = prediction_terms(student_raw, t)
    total = _combine(terms, weights)
    return (total, terms) if return_terms else total
