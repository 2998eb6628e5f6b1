"""Experiment presets built from the pipeline stages.

Every preset trains (or reuses) teachers once, then runs student variants for a
list of seeds. A student that went through distillation is copied before each
fine-tuning variant, so one distillation run serves several comparisons.
Results land in ``sweep.csv`` as (fraction, method, seed, mAP50) rows.
"""
from __future__ import annotations

import csv
import json
import logging
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import DetectorModel, build_adaptation, build_model
from .pipeline import (RunRecord, TrainConfig, distill_stage, evaluate_model,
                       finetune_stage, multi_teacher_pseudo_label, pseudo_label,
                       train_supervised, train_teacher, write_run)
from .synthdata import AccessAudit, Dataset, SceneConfig, gen_dataset, shift_dataset

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("fraction", "method", "seed", "mAP50")


@dataclass
class Scale:
    n_labeled: int = 2000
    n_unlabeled: int = 8000
    n_val: int = 500
    teacher_epochs: int = 12
    ud_epochs: int = 6
    ft_epochs: int = 20
    lr: float = 2e-3
    batch_size: int = 32
    score_thresh: float = 0.3


SCALES = {
    "full": Scale(),
    # enough teacher steps that pseudo labels are never empty
    "small": Scale(n_labeled=128, n_unlabeled=128, n_val=48, teacher_epochs=8, ud_epochs=2,
                   ft_epochs=3, batch_size=16, score_thresh=0.1),
}


@dataclass
class ExperimentResult:
    preset: str
    rows: list[dict] = field(default_factory=list)
    records: dict[str, RunRecord] = field(default_factory=dict)
    teachers: dict[str, float] = field(default_factory=dict)
    models: dict[str, DetectorModel] = field(default_factory=dict, repr=False)

    def scores(self, method: str, fraction: float | None = None) -> list[float]:
        return [r["mAP50"] for r in self.rows
                if r["method"] == method and (fraction is None or r["fraction"] == fraction)]

    def mean(self, method: str, fraction: float | None = None) -> float:
        s = self.scores(method, fraction)
        if not s:
            raise KeyError(f"no rows for {method} at fraction {fraction}")
        return float(np.mean(s))

    def summary(self) -> str:
        keys = sorted({(r["method"], r["fraction"]) for r in self.rows})
        lines = [f"{self.preset}: teachers {self.teachers}"]
        for method, frac in keys:
            s = self.scores(method, frac)
            lines.append(f"  {method:<14} fraction={frac:<4} mean={np.mean(s):.4f} "
                         f"min={np.min(s):.4f} max={np.max(s):.4f} n={len(s)}")
        return "\n".join(lines)

    def write(self, out) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "mAP50": repr(float(r["mAP50"]))})
        (out / "class_ap.json").write_text(json.dumps(
            [{k: r[k] for k in ("fraction", "method", "seed", "ap")} for r in self.rows], indent=1) + "\n")
        return out / "sweep.csv"


def train_config(scale: Scale, epochs: int, seed: int, **kw) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=scale.batch_size, lr=scale.lr, seed=seed,
                       score_thresh=scale.score_thresh, **kw)


def _attach(audit: AccessAudit | None, *datasets: Dataset | None):
    for ds in datasets:
        if ds is not None:
            ds.audit = audit


def _run_dir(out, *parts) -> Path | None:
    return None if out is None else Path(out).joinpath(*parts)


# ---------------------------------------------------------------- data

def two_class_data(seed: int, scale: Scale, shapes=("circle", "triangle")):
    cfg = SceneConfig(seed=seed, shapes=tuple(shapes))
    labeled = gen_dataset(cfg, scale.n_labeled, True, "labeled")
    unlabeled = gen_dataset(cfg, scale.n_unlabeled, False, "unlabeled")
    val = gen_dataset(cfg, scale.n_val, True, "val")
    return labeled, unlabeled, val


def fit_teacher(labeled: Dataset, val: Dataset, scale: Scale, seed: int, out=None,
                name: str = "teacher") -> tuple[DetectorModel, RunRecord]:
    audit = AccessAudit()
    _attach(audit, labeled, val)
    teacher = build_model("teacher", _num_classes(labeled, val), seed=seed)
    teacher, rec = train_teacher(teacher, labeled, train_config(scale, scale.teacher_epochs, seed), val, audit)
    _attach(None, labeled, val)
    log.info("%s best val mAP50 %.4f", name, rec.best_map or 0.0)
    if out is not None:
        write_run(_run_dir(out, name), rec, teacher, audit)
    return teacher, rec


def _num_classes(*datasets: Dataset) -> int:
    # only called on labeled splits before any stage starts; not audited
    top = 0
    for ds in datasets:
        boxes = ds.boxes if ds.boxes is not None else ds.hidden
        top = max([top] + [b.class_id + 1 for bs in boxes for b in bs])
    return top


# ---------------------------------------------------------------- student suite

@dataclass
class StudentJob:
    """Everything one seed's student runs need; shipped to worker processes."""
    teacher: DetectorModel
    pseudo: Dataset
    labeled: Dataset
    val: Dataset
    scale: Scale
    methods: tuple[str, ...]
    fractions: tuple[float, ...]
    out: Path | None
    night_labeled: Dataset | None = None
    num_classes: int | None = None


def _finish(rows, records, out, name, seed, fraction, method, model, rec, audit, val):
    # the reported score is the returned model on val: best epoch after fine-tuning,
    # final epoch after distillation alone
    with audit.stage("eval"):
        result = evaluate_model(model, val)
    rows.append({"fraction": fraction, "method": method, "seed": seed, "mAP50": result.map50,
                 "ap": {str(c): v for c, v in result.ap.items()}})
    records[f"{name}/seed{seed}"] = rec
    d = _run_dir(out, f"seed_{seed}", name)
    if d is not None:
        write_run(d, rec, model, audit)


def _combined(ud_rec: RunRecord, ft_rec: RunRecord) -> RunRecord:
    rec = RunRecord(config={"UD": ud_rec.config, "FT": ft_rec.config})
    rec.extend(ud_rec)
    rec.extend(ft_rec)
    return rec


def run_students(job: StudentJob, seed: int) -> tuple[list[dict], dict[str, RunRecord]]:
    """Methods: ``supervised``, ``UD``, ``UD+FT``, ``UD_noFM``, ``UD_noFM+FT`` and,
    when night labels are given, ``UD+FT_day`` / ``UD+FT_night``."""
    rows: list[dict] = []
    records: dict[str, RunRecord] = {}
    sc, m = job.scale, job.methods
    nc_ = job.num_classes or job.teacher.num_classes

    if "supervised" in m:
        for frac in job.fractions:
            audit = AccessAudit()
            _attach(audit, job.labeled, job.val)
            student = build_model("student", nc_, seed=seed)
            cfg = train_config(sc, sc.ft_epochs, seed, label_fraction=frac)
            student, rec = train_supervised(student, job.labeled, cfg, job.val, "FT", audit)
            _finish(rows, records, job.out, f"supervised_f{frac}", seed, frac, "supervised",
                    student, rec, audit, job.val)

    for fm, tag in ((True, "UD"), (False, "UD_noFM")):
        wanted = [x for x in m if x == tag or x.startswith(tag + "+")]
        if not wanted:
            continue
        audit = AccessAudit()
        _attach(audit, job.pseudo, job.val)
        student = build_model("student", nc_, seed=seed)
        adaptation = build_adaptation(student.feature_channels, job.teacher.feature_channels, seed) if fm else None
        ud_cfg = train_config(sc, sc.ud_epochs, seed, use_feature_term=fm)
        student, ud_rec = distill_stage(student, adaptation, job.teacher if fm else None,
                                        job.pseudo, ud_cfg, job.val, audit)
        if tag in m:
            _finish(rows, records, job.out, tag, seed, 0.0, tag, student, ud_rec, audit, job.val)
        ud_state = student.state()
        ud_entries = list(audit.entries)

        targets = []
        if tag + "+FT" in m:
            targets += [(f"{tag}+FT", f"{tag}+FT_f{frac}", job.labeled, frac) for frac in job.fractions]
        if tag + "+FT_day" in m:
            targets.append((f"{tag}+FT_day", f"{tag}+FT_day", job.labeled, 1.0))
        if tag + "+FT_night" in m and job.night_labeled is not None:
            targets.append((f"{tag}+FT_night", f"{tag}+FT_night", job.night_labeled, 1.0))
        for method, name, labels, frac in targets:
            audit = AccessAudit()
            audit.entries = list(ud_entries)
            _attach(audit, labels, job.val)
            student.load_state(ud_state)
            ft = student.copy()
            cfg = train_config(sc, sc.ft_epochs, seed, label_fraction=frac)
            ft, ft_rec = finetune_stage(ft, labels, cfg, job.val, audit)
            _finish(rows, records, job.out, name, seed, frac, method, ft, _combined(ud_rec, ft_rec),
                    audit, job.val)
    _attach(None, job.pseudo, job.labeled, job.val, job.night_labeled)
    return rows, records


_JOB: StudentJob | None = None


def _worker(seed: int):
    return run_students(_JOB, seed)


def run_seeds(job: StudentJob, seeds: Sequence[int], jobs: int = 1):
    """Runs seeds sequentially, or in forked worker processes when ``jobs > 1``."""
    global _JOB
    rows, records = [], {}
    if jobs <= 1 or len(seeds) <= 1 or "fork" not in mp.get_all_start_methods():
        results = [run_students(job, s) for s in seeds]
    else:
        _JOB = job
        try:
            with ProcessPoolExecutor(min(jobs, len(seeds)), mp_context=mp.get_context("fork")) as pool:
                results = list(pool.map(_worker, seeds))
        finally:
            _JOB = None
    for r, rec in results:
        rows += r
        records.update(rec)
    return rows, records


def _seeds(seed: int, n: int) -> list[int]:
    return [seed + i for i in range(n)]


def _pseudo(teacher, unlabeled, scale, seed):
    audit = AccessAudit()
    _attach(audit, unlabeled)
    ps = pseudo_label(teacher, unlabeled, train_config(scale, 0, seed), audit)
    _attach(None, unlabeled)
    if audit.gt_reads():
        raise RuntimeError("pseudo-labeling read ground truth")
    return ps


def _write_manifest(out, preset, seed, n_seeds, scale, extra=None):
    if out is None:
        return
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {"preset": preset, "seed": seed, "seeds": n_seeds, "scale": asdict(scale), **(extra or {})}
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- presets

def two_class(seed: int = 0, n_seeds: int = 3, scale: Scale | None = None, out=None, jobs: int = 1,
              methods: Sequence[str] = ("supervised", "UD", "UD+FT"),
              fractions: Sequence[float] = (1.0,), teacher: DetectorModel | None = None,
              data=None) -> ExperimentResult:
    scale = scale or SCALES["full"]
    _write_manifest(out, "two-class", seed, n_seeds, scale,
                    {"methods": list(methods), "fractions": list(fractions)})
    labeled, unlabeled, val = data or two_class_data(seed, scale)
    res = ExperimentResult("two-class")
    if teacher is None:
        teacher, trec = fit_teacher(labeled, val, scale, seed, out)
        res.teachers["teacher"] = trec.best_map
        res.records["teacher"] = trec
    res.models["teacher"] = teacher
    pseudo = _pseudo(teacher, unlabeled, scale, seed)
    job = StudentJob(teacher, pseudo, labeled, val, scale, tuple(methods), tuple(fractions),
                     None if out is None else Path(out))
    res.rows, recs = run_seeds(job, _seeds(seed, n_seeds), jobs)
    res.records.update(recs)
    if out is not None:
        res.write(out)
    return res


def label_sweep(seed: int = 0, n_seeds: int = 3, scale: Scale | None = None, out=None, jobs: int = 1,
                fractions: Sequence[float] = (0.2, 0.5, 1.0), **kw) -> ExperimentResult:
    res = two_class(seed, n_seeds, scale, out, jobs, ("supervised", "UD+FT"), fractions, **kw)
    res.preset = "label-sweep"
    return res


def label_fraction_sweep(fractions: Sequence[float], base: TrainConfig, scale: Scale | None = None,
                         n_seeds: int = 3, out=None, jobs: int = 1, **kw) -> ExperimentResult:
    """Supervised and UD+FT at every fraction, ``n_seeds`` seeds from ``base.seed``."""
    if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError(f"fractions must lie in (0, 1], got {list(fractions)}")
    scale = replace(scale or SCALES["full"], lr=base.lr, batch_size=base.batch_size,
                    score_thresh=base.score_thresh)
    return label_sweep(base.seed, n_seeds, scale, out, jobs, tuple(fractions), **kw)


def merge(seed: int = 0, n_seeds: int = 3, scale: Scale | None = None, out=None, jobs: int = 1,
          shapes: Sequence[str] = ("circle", "triangle", "square")) -> ExperimentResult:
    """Single-class teachers, one per shape, merged affirmatively into one student."""
    scale = scale or SCALES["full"]
    shapes = tuple(shapes)
    _write_manifest(out, "merge", seed, n_seeds, scale, {"shapes": list(shapes)})
    res = ExperimentResult(f"merge{len(shapes)}")
    teachers = []
    for t, shape in enumerate(shapes):
        lab, _, val = two_class_data(seed + 1000 * (t + 1), replace(scale, n_unlabeled=0), (shape,))
        teacher, rec = fit_teacher(lab, val, scale, seed + t, out, f"teacher_{shape}")
        teachers.append(teacher)
        res.teachers[shape] = rec.best_map
        res.models[f"teacher_{shape}"] = teacher
    labeled, unlabeled, val = two_class_data(seed, scale, shapes)
    audit = AccessAudit()
    _attach(audit, unlabeled)
    class_maps = [{0: t} for t in range(len(shapes))]
    pseudo = multi_teacher_pseudo_label(teachers, class_maps, unlabeled, train_config(scale, 0, seed),
                                        "affirmative", audit=audit)
    _attach(None, unlabeled)
    # feature matching is off, so the teacher slot is only a placeholder
    job = StudentJob(teachers[0], pseudo, labeled, val, scale, ("UD_noFM+FT",), (1.0,),
                     None if out is None else Path(out), num_classes=len(shapes))
    rows, recs = run_seeds(job, _seeds(seed, n_seeds), jobs)
    for r in rows:
        r["method"] = "merged-UD+FT"
    res.rows = rows
    res.records.update(recs)
    if out is not None:
        res.write(out)
    return res


def day_night(seed: int = 0, n_seeds: int = 3, scale: Scale | None = None, out=None, jobs: int = 1,
              teacher: DetectorModel | None = None, data=None) -> ExperimentResult:
    """Day teacher, night unlabeled images; fine-tune on day or on night labels."""
    scale = scale or SCALES["full"]
    _write_manifest(out, "day-night", seed, n_seeds, scale)
    res = ExperimentResult("day-night")
    labeled_day, _, val_day = data or two_class_data(seed, replace(scale, n_unlabeled=0))
    if teacher is None:
        teacher, trec = fit_teacher(labeled_day, val_day, scale, seed, out, "teacher_day")
        res.teachers["day"] = trec.best_map
    res.models["teacher_day"] = teacher
    # day and night fine-tuning sets have the same size
    labeled_day = labeled_day.subset(range(min(len(labeled_day), scale.n_labeled)))
    cfg = SceneConfig(seed=seed)
    night_seed = seed + 1
    unlabeled_night = shift_dataset(gen_dataset(cfg, scale.n_unlabeled, False, "unlabeled-night"), seed=night_seed)
    labeled_night = shift_dataset(gen_dataset(cfg, scale.n_labeled, True, "labeled-night"), seed=night_seed)
    val_night = shift_dataset(gen_dataset(cfg, scale.n_val, True, "val-night"), seed=night_seed)
    pseudo = _pseudo(teacher, unlabeled_night, scale, seed)
    job = StudentJob(teacher, pseudo, labeled_day, val_night, scale,
                     ("UD", "UD+FT_day", "UD+FT_night"), (1.0,),
                     None if out is None else Path(out), night_labeled=labeled_night)
    res.rows, recs = run_seeds(job, _seeds(seed, n_seeds), jobs)
    res.records.update(recs)
    if out is not None:
        res.write(out)
    return res


PRESETS = {
    "two-class": two_class,
    "merge3": merge,
    "day-night": day_night,
    "label-sweep": label_sweep,
}
