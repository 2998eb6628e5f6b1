"""Box algebra: IoU, greedy NMS, and grid encoding/decoding for the detector head.

Boxes are normalized center format. Grid arrays are indexed ``[row, col]``
where ``row`` follows y and ``col`` follows x, matching the NCHW feature layout.
The last head axis holds ``[tx, ty, tw, th, conf, class_0 .. class_{Nc-1}]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

DEFAULT_ANCHORS = ((0.15, 0.15), (0.45, 0.45))


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    score: float = 1.0

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def flipped(self) -> BBox:
        return replace(self, cx=1.0 - self.cx)


@dataclass
class DetectionSet:
    image_id: str
    boxes: list[BBox] = field(default_factory=list)

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)


@dataclass
class GridTarget:
    """Per-slot detector targets; arrays may carry a leading batch axis."""
    assign_mask: np.ndarray   # [..., K, K, B]
    xy: np.ndarray            # [..., K, K, B, 2]
    wh: np.ndarray            # [..., K, K, B, 2]
    class_onehot: np.ndarray  # [..., K, K, B, Nc]
    ignore_mask: np.ndarray   # [..., K, K, B]
    feat_mask: np.ndarray     # [..., K, K]


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """[n, 4] array of (cx, cy, w, h)."""
    if not boxes:
        return np.zeros((0, 4))
    return np.array([(b.cx, b.cy, b.w, b.h) for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two [n, 4] / [m, 4] center-format arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a0 = a[:, None, :2] - a[:, None, 2:] / 2
    a1 = a[:, None, :2] + a[:, None, 2:] / 2
    b0 = b[None, :, :2] - b[None, :, 2:] / 2
    b1 = b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, None, 2] * a[:, None, 3]) + (b[None, :, 2] * b[None, :, 3]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def score_order(boxes: Sequence[BBox]) -> list[int]:
    """Indices by descending score; ties go to lower class id, then input order."""
    return sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, boxes[i].class_id, i))


def nms(dets: DetectionSet, iou_thresh: float = 0.5, class_aware: bool = True) -> DetectionSet:
    boxes = list(dets.boxes)
    if not boxes:
        return DetectionSet(dets.image_id, [])
    order = score_order(boxes)
    arr = boxes_to_array(boxes)
    overlaps = iou_matrix(arr, arr)
    classes = np.array([b.class_id for b in boxes])
    alive = np.ones(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(boxes[i])
        suppress = overlaps[i] > iou_thresh
        if class_aware:
            suppress &= classes == classes[i]
        alive &= ~suppress
    return DetectionSet(dets.image_id, keep)


def _cell(v: float, k: int) -> int:
    return min(max(int(np.floor(v * k)), 0), k - 1)


def best_anchor(w: float, h: float, anchors: Sequence[tuple[float, float]]) -> int:
    """Anchor whose shape, placed at the box center, overlaps the box most."""
    best, best_iou = 0, -1.0
    for j, (aw, ah) in enumerate(anchors):
        inter = min(w, aw) * min(h, ah)
        score = inter / (w * h + aw * ah - inter)
        if score > best_iou:
            best, best_iou = j, score
    return best


def encode_targets(boxes: Sequence[BBox], k: int, b: int,
                   anchors: Sequence[tuple[float, float]] = DEFAULT_ANCHORS,
                   num_classes: int = 1) -> GridTarget:
    if len(anchors) != b:
        raise ValueError(f"{b} slots but {len(anchors)} anchors")
    if k < 1:
        raise ValueError("grid size must be >= 1")
    mask = np.zeros((k, k, b))
    xy = np.zeros((k, k, b, 2))
    wh = np.zeros((k, k, b, 2))
    onehot = np.zeros((k, k, b, num_classes))
    for box in boxes:
        col, row = _cell(box.cx, k), _cell(box.cy, k)
        j = best_anchor(box.w, box.h, anchors)
        mask[row, col, j] = 1.0
        xy[row, col, j] = (box.cx * k - col, box.cy * k - row)
        wh[row, col, j] = (box.w, box.h)
        onehot[row, col, j] = 0.0
        onehot[row, col, j, box.class_id] = 1.0
    return GridTarget(mask, xy, wh, onehot, mask.copy(), np.zeros((k, k)))


def decode_raw(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boxes [K,K,B,4], scores [K,K,B], classes [K,K,B] from head logits.

    Boxes are clipped to the image and reported in center format.
    """
    raw = np.asarray(raw, dtype=np.float64)
    k = raw.shape[0]
    s = expit(raw[..., :5])
    cols = np.arange(k)[None, :, None]
    rows = np.arange(k)[:, None, None]
    cx = (cols + s[..., 0]) / k
    cy = (rows + s[..., 1]) / k
    w, h = s[..., 2], s[..., 3]
    x0 = np.clip(cx - w / 2, 0.0, 1.0)
    x1 = np.clip(cx + w / 2, 0.0, 1.0)
    y0 = np.clip(cy - h / 2, 0.0, 1.0)
    y1 = np.clip(cy + h / 2, 0.0, 1.0)
    boxes = np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)
    cls_prob = expit(raw[..., 5:])
    classes = cls_prob.argmax(axis=-1)
    scores = s[..., 4] * cls_prob.max(axis=-1)
    return boxes, scores, classes


def decode_predictions(raw, score_thresh: float = 0.3, image_id: str = "") -> DetectionSet:
    if not isinstance(raw, np.ndarray):
        raw = raw.data
    boxes, scores, classes = decode_raw(raw)
    out = []
    for idx in zip(*np.nonzero(scores >= score_thresh)):
        cx, cy, w, h = boxes[idx]
        if w <= 0 or h <= 0:
            continue
        out.append(BBox(float(cx), float(cy), float(w), float(h), int(classes[idx]), float(scores[idx])))
    order = score_order(out)
    return DetectionSet(image_id, [out[i] for i in order])


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)
