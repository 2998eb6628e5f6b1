"""Average precision at IoU 0.5 with all-point interpolation."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import DetectionSet, boxes_to_array, iou_matrix


@dataclass
class EvalResult:
    ap: dict[int, float]
    map50: float
    counts: dict[int, dict[str, int]]
    pr: dict[int, list[tuple[float, float]]] = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["ap"] = {str(k): v for k, v in self.ap.items()}
        d["counts"] = {str(k): v for k, v in self.counts.items()}
        d["pr"] = {str(k): [list(p) for p in v] for k, v in self.pr.items()}
        return d


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope."""
    if len(recall) == 0:
        return 0.0
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _index(sets: Sequence[DetectionSet], what: str) -> dict[str, DetectionSet]:
    out: dict[str, DetectionSet] = {}
    for s in sets:
        if s.image_id in out:
            raise ValueError(f"duplicate image id {s.image_id!r} in {what}")
        out[s.image_id] = s
    return out


def evaluate(preds: Sequence[DetectionSet], gt: Sequence[DetectionSet],
             iou_thresh: float = 0.5) -> EvalResult:
    gt_by_id = _index(gt, "ground truth")
    pred_by_id = _index(preds, "predictions")
    unknown = set(pred_by_id) - set(gt_by_id)
    if unknown:
        raise ValueError(f"predictions for unknown images: {sorted(unknown)[:5]}")

    classes = sorted({b.class_id for s in gt for b in s} | {b.class_id for s in preds for b in s})
    ap: dict[int, float] = {}
    counts: dict[int, dict[str, int]] = {}
    pr: dict[int, list[tuple[float, float]]] = {}
    for c in classes:
        gts = {iid: boxes_to_array([b for b in s if b.class_id == c]) for iid, s in gt_by_id.items()}
        npos = int(sum(len(g) for g in gts.values()))
        dets = [(-b.score, iid, j, b) for iid, s in pred_by_id.items()
                for j, b in enumerate(s.boxes) if b.class_id == c]
        dets.sort(key=lambda d: d[:3])
        used = {iid: np.zeros(len(g), dtype=bool) for iid, g in gts.items()}
        tp = np.zeros(len(dets))
        for k, (_, iid, _, b) in enumerate(dets):
            g = gts[iid]
            if len(g) == 0:
                continue
            ov = iou_matrix(np.array([[b.cx, b.cy, b.w, b.h]]), g)[0]
            ov[used[iid]] = -1.0
            best = int(np.argmax(ov))
            if ov[best] >= iou_thresh:
                used[iid][best] = True
                tp[k] = 1.0
        ntp = int(tp.sum())
        counts[c] = {"tp": ntp, "fp": len(dets) - ntp, "fn": npos - ntp, "gt": npos}
        if npos == 0:
            continue
        ctp = np.cumsum(tp)
        recall = ctp / npos
        precision = ctp / np.arange(1, len(dets) + 1)
        ap[c] = average_precision(recall, precision)
        pr[c] = [(float(r), float(p)) for r, p in zip(recall, precision)]
    map50 = float(np.mean(list(ap.values()))) if ap else 0.0
    return EvalResult(ap, map50, counts, pr)


def pr_curve(result: EvalResult, class_id: int) -> list[tuple[float, float]]:
    if class_id not in result.pr:
        raise KeyError(f"no ground truth for class {class_id}")
    return list(result.pr[class_id])


def write_eval(result: EvalResult, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "eval.json").write_text(json.dumps(result.to_json(), indent=1) + "\n")
    for c, points in result.pr.items():
        with open(directory / f"pr_{c}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["recall", "precision"])
            w.writerows(points)
    return directory
