"""Two-step training: distill from teacher pseudo labels, then fine-tune on labels.

Stages are tagged in the dataset access audit (``teacher``, ``UD``, ``FT``,
``eval``) so tests can prove that no ground-truth annotation is read while the
student learns from the teacher.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .detector import (AdaptationLayer, DetectorModel, adapt, build_adaptation, forward,
                       predict_features, predict_raw, save_checkpoint)
from .evaluation import evaluate
from .geometry import (DEFAULT_ANCHORS, BBox, DetectionSet, decode_predictions, iou_matrix,
                       boxes_to_array, nms, score_order)
from .losses import build_grid_target, feature_mask, gt_loss, ignore_update, kd_loss, stack_targets
from .synthdata import AccessAudit, Dataset

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("stage", "epoch", "L_F", "L_box", "L_conf", "L_class", "val_mAP50")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    score_thresh: float = 0.3
    nms_iou: float = 0.5
    ignore_thresh: float = 0.5
    use_feature_term: bool = True
    label_fraction: float = 1.0
    augment_flip: bool = True
    anchors: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS
    eval_score_thresh: float = 0.05
    loss_weights: dict | None = None
    adapt_bias_init: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ValueError(f"label_fraction {self.label_fraction} outside [0, 1]")
        for name in ("score_thresh", "nms_iou", "ignore_thresh"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")
        self.anchors = tuple(tuple(float(v) for v in a) for a in self.anchors)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    final_map: float | None = None
    best_map: float | None = None
    best_epoch: int | None = None
    wall_clock: float = 0.0
    data_hashes: dict[str, str] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def log_epoch(self, row: dict):
        self.epochs.append(dict(row))
        m = row.get("val_mAP50")
        if m is not None:
            self.final_map = m
            if self.best_map is None or m > self.best_map:
                self.best_map, self.best_epoch = m, len(self.epochs) - 1

    def extend(self, other: RunRecord):
        for row in other.epochs:
            self.log_epoch(row)
        self.data_hashes.update(other.data_hashes)
        self.wall_clock += other.wall_clock
        self.notes.update(other.notes)

    def write_metrics(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for row in self.epochs:
                w.writerow({k: ("" if row.get(k) is None else _fmt(row.get(k))) for k in METRIC_COLUMNS})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def data_hash(ds: Dataset) -> str:
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(ds.images).tobytes())
    h.update("\n".join(ds.ids).encode())
    return h.hexdigest()


# ---------------------------------------------------------------- inference

def predict(model: DetectorModel, ds: Dataset, score_thresh: float = 0.05,
            nms_iou: float | None = 0.5, batch_size: int = 128) -> list[DetectionSet]:
    raw = predict_raw(model, ds.images, batch_size)
    out = []
    for i, sid in enumerate(ds.ids):
        dets = decode_predictions(raw[i], score_thresh, sid)
        if nms_iou is not None:
            dets = nms(dets, nms_iou, class_aware=True)
        out.append(dets)
    return out


def evaluate_model(model: DetectorModel, val: Dataset, cfg: TrainConfig | None = None,
                   gt: list[DetectionSet] | None = None):
    cfg = cfg or TrainConfig()
    if gt is None:
        gt = [DetectionSet(sid, list(b)) for sid, b in zip(val.ids, val.ground_truth())]
    preds = predict(model, val, cfg.eval_score_thresh, cfg.nms_iou)
    return evaluate(preds, gt)


# ---------------------------------------------------------------- training core

class _TargetCache:
    """Grid targets per (sample, flipped), built on first use."""

    def __init__(self, boxes: list[list[BBox]], model: DetectorModel, anchors):
        self.boxes = boxes
        self.k, self.b, self.nc = model.k, model.b, model.num_classes
        self.anchors = anchors
        self._cache = {}

    def boxes_for(self, i: int, flip: bool) -> list[BBox]:
        return [b.flipped() for b in self.boxes[i]] if flip else self.boxes[i]

    def get(self, i: int, flip: bool):
        key = (i, flip)
        if key not in self._cache:
            self._cache[key] = build_grid_target(self.boxes_for(i, flip), self.k, self.b,
                                                 self.anchors, self.nc)
        return self._cache[key]


def _epoch_order(rng: np.random.Generator, n: int, flip: bool):
    order = rng.permutation(n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    return order, flips


def _images(ds: Dataset, idx, flips) -> np.ndarray:
    x = ds.batch(idx)
    if flips.any():
        x[flips] = x[flips][..., ::-1]
    return x


class _TeacherFeatures:
    def __init__(self, teacher: DetectorModel, ds: Dataset):
        self.teacher = teacher
        self.ds = ds
        self._cache: dict[tuple[int, bool], np.ndarray] = {}

    def get(self, idx, flips) -> np.ndarray:
        missing = [(int(i), bool(f)) for i, f in zip(idx, flips) if (int(i), bool(f)) not in self._cache]
        if missing:
            mi = np.array([m[0] for m in missing])
            mf = np.array([m[1] for m in missing])
            feats, _ = forward(_frozen(self.teacher), _images(self.ds, mi, mf))
            for key, f in zip(missing, feats.data):
                self._cache[key] = f
        return np.stack([self._cache[(int(i), bool(f))] for i, f in zip(idx, flips)])


def _frozen(m: DetectorModel) -> DetectorModel:
    return DetectorModel(m.arch, m.num_classes, m.channels, m.k, m.b, m.image_size, m.seed,
                         [nc.Tensor(p.data) for p in m.params])


def _run_epochs(model: DetectorModel, ds: Dataset, boxes: list[list[BBox]], cfg: TrainConfig,
                stage: str, record: RunRecord, *, teacher: DetectorModel | None = None,
                adaptation: AdaptationLayer | None = None, distill: bool = False,
                val: Dataset | None = None, select_best: bool = True,
                snapshot_epochs: list | None = None):
    params = list(model.params)
    if adaptation is not None:
        params += adaptation.params
    opt = nc.Adam(params, lr=cfg.lr)
    rng = np.random.Generator(np.random.Philox(key=cfg.seed, counter=[0, 0, 0, hash_stage(stage)]))
    targets = _TargetCache(boxes, model, cfg.anchors)
    use_features = distill and cfg.use_feature_term
    tfeats = _TeacherFeatures(teacher, ds) if use_features else None
    val_gt = None
    if val is not None and select_best:
        val_gt = [DetectionSet(sid, list(b)) for sid, b in zip(val.ids, val.ground_truth())]
    best_state, best_map = None, -1.0
    n = len(ds)
    for epoch in range(cfg.epochs):
        order, flips = _epoch_order(rng, n, cfg.augment_flip)
        sums = {"feature": 0.0, "box": 0.0, "conf": 0.0, "class": 0.0}
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            fl = flips[start:start + cfg.batch_size]
            x = nc.Tensor(_images(ds, idx, fl))
            feats, raw = forward(model, x)
            t = stack_targets([targets.get(int(i), bool(f)) for i, f in zip(idx, fl)])
            src = [targets.boxes_for(int(i), bool(f)) for i, f in zip(idx, fl)]
            t = ignore_update(t, raw, src, cfg.ignore_thresh)
            if distill:
                ft = tfeats.get(idx, fl) if use_features else None
                fs = adapt(adaptation, feats) if use_features else None
                loss, terms = kd_loss(ft, fs, raw, t, use_features, cfg.loss_weights, return_terms=True)
            else:
                loss, terms = gt_loss(raw, t, cfg.loss_weights, return_terms=True)
            for p in params:
                p.grad = None
            loss.backward()
            opt.step()
            for key, v in terms.items():
                sums[key] += v.item()
            steps += 1
        row = {"stage": stage, "epoch": epoch,
               "L_F": sums["feature"] / steps if use_features else None,
               "L_box": sums["box"] / steps, "L_conf": sums["conf"] / steps,
               "L_class": sums["class"] / steps, "val_mAP50": None}
        if val_gt is not None:
            row["val_mAP50"] = evaluate_model(model, val, cfg, val_gt).map50
            if row["val_mAP50"] > best_map:
                best_map, best_state = row["val_mAP50"], model.state()
        if snapshot_epochs is not None:
            snapshot_epochs.append(model.state())
        record.log_epoch(row)
        log.info("%s epoch %d: %s", stage, epoch, {k: v for k, v in row.items() if k not in ("stage", "epoch")})
    if select_best and best_state is not None:
        model.load_state(best_state)
    return model


def hash_stage(stage: str) -> int:
    return int.from_bytes(hashlib.sha1(stage.encode()).digest()[:4], "little")


def _start_record(cfg: TrainConfig, **datasets: Dataset) -> RunRecord:
    rec = RunRecord(config=cfg.to_dict())
    rec.data_hashes = {name: data_hash(ds) for name, ds in datasets.items() if ds is not None}
    return rec


def _stage(audit: AccessAudit | None, name: str):
    import contextlib
    return audit.stage(name) if audit is not None else contextlib.nullcontext()


# ---------------------------------------------------------------- stages

def train_supervised(model: DetectorModel, labeled: Dataset, cfg: TrainConfig,
                     val: Dataset | None = None, stage: str = "FT",
                     audit: AccessAudit | None = None) -> tuple[DetectorModel, RunRecord]:
    """Minimize the ground-truth loss on (a fraction of) a labeled split."""
    if not labeled.labeled:
        raise ValueError(f"dataset {labeled.name!r} has no visible annotations")
    subset = subsample(labeled, cfg.label_fraction, cfg.seed)
    rec = _start_record(cfg, train=subset, val=val)
    t0 = time.perf_counter()
    with _stage(audit, stage):
        boxes = subset.annotations()
        _run_epochs(model, subset, boxes, cfg, stage, rec, val=val)
    rec.wall_clock = time.perf_counter() - t0
    rec.notes[f"{stage}_samples"] = len(subset)
    return model, rec


def subsample(ds: Dataset, fraction: float, seed: int) -> Dataset:
    if fraction >= 1.0:
        return ds
    keep = int(round(fraction * len(ds)))
    if keep < 1:
        raise ValueError(f"label fraction {fraction} of {len(ds)} samples leaves no data")
    rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 1, 0]))
    idx = np.sort(rng.permutation(len(ds))[:keep])
    return ds.subset(idx)


def finetune_stage(student: DetectorModel, labeled: Dataset, cfg: TrainConfig,
                   val: Dataset | None = None, audit: AccessAudit | None = None):
    return train_supervised(student, labeled, cfg, val, "FT", audit)


def train_teacher(teacher: DetectorModel, labeled: Dataset, cfg: TrainConfig,
                  val: Dataset | None = None, audit: AccessAudit | None = None):
    return train_supervised(teacher, labeled, cfg, val, "teacher", audit)


def pseudo_label(teacher: DetectorModel, images: Dataset, cfg: TrainConfig,
                 audit: AccessAudit | None = None) -> Dataset:
    """Teacher detections (score threshold + NMS) as labels; empty images dropped."""
    with _stage(audit, "pseudo-label"):
        dets = predict(teacher, images, cfg.score_thresh, cfg.nms_iou)
    keep = [i for i, d in enumerate(dets) if len(d)]
    return _pseudo_dataset(images, keep, [dets[i].boxes for i in keep])


def _pseudo_dataset(images: Dataset, keep: list[int], boxes: list[list[BBox]]) -> Dataset:
    return Dataset(images.images[keep], [images.ids[i] for i in keep], boxes=boxes,
                   domain=images.domain, seed=images.seed, source="pseudo",
                   name=images.name + "-pseudo", audit=images.audit)


def init_adaptation_bias(adaptation: AdaptationLayer, teacher: DetectorModel, pseudo: Dataset,
                         n: int = 256) -> np.ndarray:
    """Set the adaptation bias to the teacher's mean feature inside the imitation mask.

    Teacher backbone features sit far from zero (post leaky-ReLU). With a zero
    bias the residual starts as that mean, and its gradient pushes the student
    in one fixed direction for several epochs. Only pseudo boxes are read.
    """
    idx = list(range(min(n, len(pseudo))))
    boxes = pseudo.annotations(idx)
    mask = np.stack([feature_mask(b, teacher.k) for b in boxes]) > 0
    feats = np.concatenate([predict_features(teacher, pseudo.batch(idx[i:i + 64]))[0]
                            for i in range(0, len(idx), 64)])
    if mask.any():
        adaptation.bias.data[:] = feats.transpose(0, 2, 3, 1)[mask].mean(axis=0)
    return adaptation.bias.data


def distill_stage(student: DetectorModel, adaptation: AdaptationLayer | None,
                  teacher: DetectorModel | None, pseudo: Dataset, cfg: TrainConfig,
                  val: Dataset | None = None, audit: AccessAudit | None = None):
    """Minimize the distillation loss over teacher pseudo labels.

    The returned student holds the final-epoch weights; if ``val`` is given,
    per-epoch validation mAP is computed afterwards from snapshots, outside
    the distillation stage.
    """
    if len(pseudo) == 0:
        raise ValueError("teacher produced no pseudo labels; lower score_thresh")
    if pseudo.source != "pseudo":
        raise ValueError("distillation consumes pseudo labels only")
    if cfg.use_feature_term:
        if teacher is None or adaptation is None:
            raise ValueError("feature matching needs the teacher and an adaptation layer")
        if (teacher.k, teacher.b) != (student.k, student.b):
            raise ValueError("teacher and student grids differ")
    rec = _start_record(cfg, pseudo=pseudo)
    snaps: list = []
    t0 = time.perf_counter()
    with _stage(audit, "UD"):
        if cfg.use_feature_term and cfg.adapt_bias_init:
            init_adaptation_bias(adaptation, teacher, pseudo)
        boxes = pseudo.annotations()
        _run_epochs(student, pseudo, boxes, cfg, "UD", rec, teacher=teacher, adaptation=adaptation,
                    distill=True, select_best=False, snapshot_epochs=snaps)
    rec.wall_clock = time.perf_counter() - t0
    rec.notes["UD_samples"] = len(pseudo)
    rec.notes["feature_term"] = bool(cfg.use_feature_term)
    if val is not None:
        final = student.state()
        with _stage(audit, "eval"):
            gt = [DetectionSet(sid, list(b)) for sid, b in zip(val.ids, val.ground_truth())]
            for row, state in zip(rec.epochs, snaps):
                student.load_state(state)
                row["val_mAP50"] = evaluate_model(student, val, cfg, gt).map50
        student.load_state(final)
        maps = [r["val_mAP50"] for r in rec.epochs]
        if maps:
            rec.final_map = maps[-1]
            rec.best_epoch = int(np.argmax(maps))
            rec.best_map = maps[rec.best_epoch]
    return student, rec


# ---------------------------------------------------------------- multi-teacher

MODES = ("affirmative", "consensus", "unanimous")


def _agree(a: BBox, b: BBox, thr: float) -> bool:
    if a.class_id != b.class_id:
        return False
    return iou_matrix(boxes_to_array([a]), boxes_to_array([b]))[0, 0] >= thr


def aggregate(teacher_dets: Sequence[DetectionSet], mode: str = "affirmative",
              iou_thresh: float = 0.5, apply_nms: bool = False, nms_iou: float = 0.5) -> DetectionSet:
    """Merge one image's detections from several teachers (labels already in union space)."""
    if not teacher_dets:
        raise ValueError("no teachers to aggregate")
    if mode not in MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    image_id = teacher_dets[0].image_id
    pool = [(t, b) for t, d in enumerate(teacher_dets) for b in d.boxes]
    boxes = [b for _, b in pool]
    order = score_order(boxes)
    if mode == "affirmative":
        merged = [boxes[i] for i in order]
    else:
        n_teachers = len(teacher_dets)
        need = n_teachers if mode == "unanimous" else n_teachers // 2 + 1
        arr = boxes_to_array(boxes)
        ov = iou_matrix(arr, arr) if boxes else np.zeros((0, 0))
        cls = np.array([b.class_id for b in boxes])
        owner = np.array([t for t, _ in pool])
        agree = (ov >= iou_thresh) & (cls[:, None] == cls[None, :]) if boxes else ov.astype(bool)
        supported = [len(set(owner[agree[i]])) >= need for i in range(len(boxes))]
        removed = np.zeros(len(boxes), dtype=bool)
        merged = []
        for i in order:
            if not supported[i] or removed[i]:
                continue
            merged.append(boxes[i])
            removed |= agree[i] & (owner != owner[i])
    out = DetectionSet(image_id, merged)
    if apply_nms:
        out = nms(out, nms_iou, class_aware=True)
    return out


def remap_classes(dets: DetectionSet, class_map: dict[int, int]) -> DetectionSet:
    return DetectionSet(dets.image_id, [replace(b, class_id=class_map[b.class_id]) for b in dets.boxes])


def check_class_maps(class_maps: Sequence[dict[int, int]], teachers: Sequence[DetectorModel]):
    for t, (m, model) in enumerate(zip(class_maps, teachers)):
        if sorted(m) != list(range(model.num_classes)):
            raise ValueError(f"class map {t} must cover teacher classes 0..{model.num_classes - 1}")
        targets = list(m.values())
        if len(set(targets)) != len(targets):
            raise ValueError(f"class map {t} sends two teacher classes to one union class")


def multi_teacher_pseudo_label(teachers: Sequence[DetectorModel], class_maps, images: Dataset,
                               cfg: TrainConfig, mode: str = "affirmative", apply_nms: bool = False,
                               audit: AccessAudit | None = None) -> Dataset:
    check_class_maps(class_maps, teachers)
    with _stage(audit, "pseudo-label"):
        per_teacher = [predict(t, images, cfg.score_thresh, cfg.nms_iou) for t in teachers]
    merged = [aggregate([remap_classes(per_teacher[t][i], class_maps[t]) for t in range(len(teachers))],
                        mode, cfg.nms_iou, apply_nms) for i in range(len(images))]
    keep = [i for i, d in enumerate(merged) if len(d)]
    return _pseudo_dataset(images, keep, [merged[i].boxes for i in keep])


def merge_teachers_experiment(teachers: Sequence[DetectorModel], class_maps, union_classes: int,
                              unlabeled: Dataset, labeled: Dataset | None, cfg_ud: TrainConfig,
                              cfg_ft: TrainConfig, student_seed: int = 0, val: Dataset | None = None,
                              audit: AccessAudit | None = None):
    from .detector import build_model
    pseudo = multi_teacher_pseudo_label(teachers, class_maps, unlabeled, cfg_ud, audit=audit)
    student = build_model("student", union_classes, seed=student_seed)
    ud_cfg = replace(cfg_ud, use_feature_term=False)
    student, rec = distill_stage(student, None, None, pseudo, ud_cfg, val, audit)
    rec.config = {"UD": ud_cfg.to_dict(), "FT": cfg_ft.to_dict()}
    if labeled is not None:
        student, ft_rec = finetune_stage(student, labeled, cfg_ft, val, audit)
        rec.extend(ft_rec)
    return student, rec


# ---------------------------------------------------------------- full runs

def decoupled_run(teacher: DetectorModel, unlabeled: Dataset, labeled: Dataset | None,
                  cfg_ud: TrainConfig, cfg_ft: TrainConfig, student_seed: int = 0,
                  val: Dataset | None = None, audit: AccessAudit | None = None,
                  pseudo: Dataset | None = None):
    """Pseudo-label, distill, then fine-tune if labels are given."""
    from .detector import build_model
    if pseudo is None:
        pseudo = pseudo_label(teacher, unlabeled, cfg_ud, audit)
    student = build_model("student", teacher.num_classes, seed=student_seed)
    adaptation = build_adaptation(student.feature_channels, teacher.feature_channels, seed=student_seed)
    student, rec = distill_stage(student, adaptation if cfg_ud.use_feature_term else None,
                                 teacher, pseudo, cfg_ud, val, audit)
    rec.config = {"UD": cfg_ud.to_dict(), "FT": cfg_ft.to_dict()}
    if labeled is not None:
        student, ft_rec = finetune_stage(student, labeled, cfg_ft, val, audit)
        rec.extend(ft_rec)
    return student, rec


def domain_adaptation_experiment(teacher_day: DetectorModel, unlabeled_night: Dataset,
                                 labeled_day: Dataset, labeled_night: Dataset | None,
                                 cfg_ud: TrainConfig, cfg_ft: TrainConfig, val_night: Dataset,
                                 student_seed: int = 0, audit: AccessAudit | None = None,
                                 pseudo: Dataset | None = None):
    target = labeled_night if labeled_night is not None else labeled_day
    student, rec = decoupled_run(teacher_day, unlabeled_night, target, cfg_ud, cfg_ft, student_seed,
                                 val_night, audit, pseudo)
    with _stage(audit, "eval"):
        rec.notes["night_val_mAP50"] = evaluate_model(student, val_night, cfg_ft).map50
    rec.notes["finetune_domain"] = "night" if labeled_night is not None else "day"
    return student, rec


def write_run(directory, rec: RunRecord, model: DetectorModel | None = None,
              audit: AccessAudit | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(rec.config, indent=1, sort_keys=True) + "\n")
    rec.write_metrics(directory / "metrics.csv")
    if model is not None:
        save_checkpoint(model, directory / "best.ckpt")
    if audit is not None:
        audit.write(directory / "audit.log")
    summary = {"final_mAP50": rec.final_map, "best_mAP50": rec.best_map, "best_epoch": rec.best_epoch,
               "wall_clock": rec.wall_clock, "data_hashes": rec.data_hashes, "notes": rec.notes}
    (directory / "record.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=str) + "\n")
    return directory
