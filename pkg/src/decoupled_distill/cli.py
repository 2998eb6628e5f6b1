"""Command-line entry point.

Exit codes: 0 success, 2 usage error (bad flags or missing inputs), 1 runtime
failure. Training flags override a JSON ``--config`` file, which overrides the
built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import experiments as ex
from .detector import build_adaptation, build_model, load_checkpoint, save_checkpoint
from .evaluation import evaluate, write_eval
from .geometry import DetectionSet
from .pipeline import (TrainConfig, distill_stage, finetune_stage, merge_teachers_experiment, predict,
                       pseudo_label, train_teacher, write_run)
from .synthdata import SHAPES, AccessAudit, SceneConfig, gen_dataset, read_dataset, shift_dataset, write_dataset

log = logging.getLogger("decoupled_distill")


class UsageError(Exception):
    pass


class _HelpFormatter(argparse.HelpFormatter):
    """Appends defaults that carry information; None and False stay silent."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default:" in text or action.default in (None, False, argparse.SUPPRESS) or action.required:
            return text
        return f"{text} (default: {action.default})"


# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "epochs": int, "batch_size": int, "lr": float, "score_thresh": float, "nms_iou": float,
    "ignore_thresh": float, "label_fraction": float,
}
_DEFAULTS = TrainConfig()


def _add_common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    p.add_argument("--config", type=Path, help="JSON file with defaults for this command (default: none)")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_train(p: argparse.ArgumentParser, feature_flag: bool = False):
    g = p.add_argument_group("training")
    for name, kind in TRAIN_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), type=kind, default=None,
                       help=f"(default: {getattr(_DEFAULTS, name)})")
    g.add_argument("--no-flip", action="store_true", help="disable horizontal-flip augmentation")
    if feature_flag:
        g.add_argument("--no-feature-term", action="store_true",
                       help="drop the feature-matching term from the distillation loss")


def _path(p: Path, what: str, kind: str = "dir") -> Path:
    if p is None or not p.exists() or (kind == "dir" and not p.is_dir()):
        raise UsageError(f"{what} {p} does not exist")
    return p


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    _path(args.config, "config file", "file")
    try:
        cfg = json.loads(args.config.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{args.config}: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    return cfg


def train_config(args, **extra) -> TrainConfig:
    """Defaults < config file < flags."""
    cfg = _load_config(args)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg) - known - {"scale", "shapes"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    values = {k: v for k, v in cfg.items() if k in known}
    for name in TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "no_flip", False):
        values["augment_flip"] = False
    if getattr(args, "no_feature_term", False):
        values["use_feature_term"] = False
    values["seed"] = args.seed
    values.update(extra)
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    cfg = SceneConfig(seed=args.seed, shapes=tuple(args.shapes))
    ds = gen_dataset(cfg, args.n, not args.unlabeled, args.split, args.domain)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")


def cmd_shift_domain(args):
    ds = read_dataset(_path(args.data, "dataset"))
    write_dataset(shift_dataset(ds, args.shift, args.seed), args.out)
    print(f"wrote {len(ds)} {args.shift} samples to {args.out}")


def cmd_train_teacher(args):
    data = read_dataset(_path(args.data, "dataset"))
    val = read_dataset(_path(args.val, "validation set")) if args.val else None
    cfg = train_config(args)
    audit = AccessAudit()
    data.audit = audit
    if val is not None:
        val.audit = audit
    nc = args.num_classes or _max_class(data)
    model = build_model(args.arch, nc, seed=args.seed)
    model, rec = train_teacher(model, data, cfg, val, audit)
    write_run(args.out, rec, model, audit)
    print(f"{args.arch}: best val mAP50 {rec.best_map}, checkpoint {args.out / 'best.ckpt'}")


def _max_class(ds) -> int:
    boxes = ds.boxes if ds.boxes is not None else []
    return max([b.class_id + 1 for bs in boxes for b in bs], default=1)


def cmd_pseudo_label(args):
    teacher = load_checkpoint(_path(args.teacher, "checkpoint", "file"))
    images = read_dataset(_path(args.data, "dataset"))
    cfg = train_config(args)
    audit = AccessAudit()
    images.audit = audit
    ps = pseudo_label(teacher, images, cfg, audit)
    write_dataset(ps, args.out)
    audit.write(args.out / "audit.log")
    print(f"{len(ps)} of {len(images)} images kept with pseudo labels")


def cmd_distill(args):
    pseudo = read_dataset(_path(args.pseudo, "pseudo-label set"))
    val = read_dataset(_path(args.val, "validation set")) if args.val else None
    cfg = train_config(args)
    teacher = load_checkpoint(_path(args.teacher, "checkpoint", "file")) if args.teacher else None
    if cfg.use_feature_term and teacher is None:
        raise UsageError("feature matching needs --teacher (or pass --no-feature-term)")
    nc = teacher.num_classes if teacher else _max_class(pseudo)
    student = build_model("student", nc, seed=args.seed)
    adaptation = build_adaptation(student.feature_channels, teacher.feature_channels, args.seed) \
        if cfg.use_feature_term else None
    audit = AccessAudit()
    pseudo.audit = audit
    if val is not None:
        val.audit = audit
    student, rec = distill_stage(student, adaptation, teacher, pseudo, cfg, val, audit)
    write_run(args.out, rec, student, audit)
    print(f"distilled student: final val mAP50 {rec.final_map}")


def cmd_finetune(args):
    student = load_checkpoint(_path(args.student, "checkpoint", "file"))
    data = read_dataset(_path(args.data, "dataset"))
    val = read_dataset(_path(args.val, "validation set")) if args.val else None
    cfg = train_config(args)
    audit = AccessAudit()
    data.audit = audit
    if val is not None:
        val.audit = audit
    student, rec = finetune_stage(student, data, cfg, val, audit)
    write_run(args.out, rec, student, audit)
    print(f"fine-tuned student: best val mAP50 {rec.best_map}")


def _class_map(text: str) -> dict[int, int]:
    try:
        return {int(a): int(b) for a, b in (pair.split(":") for pair in text.split(","))}
    except ValueError:
        raise UsageError(f"class map {text!r} must look like 0:2,1:3") from None


def cmd_merge_teachers(args):
    teachers = [load_checkpoint(_path(p, "checkpoint", "file")) for p in args.teachers]
    maps = [_class_map(t) for t in args.class_maps] if args.class_maps else \
        [{c: c + sum(t.num_classes for t in teachers[:i]) for c in range(m.num_classes)}
         for i, m in enumerate(teachers)]
    if len(maps) != len(teachers):
        raise UsageError("need one --class-maps entry per teacher")
    union = args.union_classes or 1 + max(v for m in maps for v in m.values())
    unlabeled = read_dataset(_path(args.data, "dataset"))
    labeled = read_dataset(_path(args.labeled, "labeled set")) if args.labeled else None
    val = read_dataset(_path(args.val, "validation set")) if args.val else None
    cfg = train_config(args)
    ft_cfg = replace(cfg, epochs=args.ft_epochs) if args.ft_epochs is not None else cfg
    audit = AccessAudit()
    for ds in (unlabeled, labeled, val):
        if ds is not None:
            ds.audit = audit
    student, rec = merge_teachers_experiment(teachers, maps, union, unlabeled, labeled, cfg, ft_cfg,
                                             args.seed, val, audit)
    write_run(args.out, rec, student, audit)
    print(f"merged student over {union} classes: val mAP50 {rec.final_map}")


def cmd_eval(args):
    gt_ds = read_dataset(_path(args.data, "ground-truth set"))
    gt = [DetectionSet(i, list(b)) for i, b in zip(gt_ds.ids, gt_ds.ground_truth())]
    if (args.pred is None) == (args.model is None):
        raise UsageError("give exactly one of --pred or --model")
    if args.pred is not None:
        pd = read_dataset(_path(args.pred, "prediction set"))
        preds = [DetectionSet(i, list(b)) for i, b in zip(pd.ids, pd.boxes or [])]
    else:
        model = load_checkpoint(_path(args.model, "checkpoint", "file"))
        preds = predict(model, gt_ds, args.score_thresh, args.nms_iou)
    result = evaluate(preds, gt, args.iou)
    write_eval(result, args.out)
    for c, ap in sorted(result.ap.items()):
        print(f"class {c}: AP50 {ap:.4f}")
    print(f"mAP50 {result.map50:.4f}")


def _scale(args) -> ex.Scale:
    cfg = _load_config(args)
    base = ex.SCALES[args.scale]
    overrides = cfg.get("scale", {})
    bad = set(overrides) - {f.name for f in fields(ex.Scale)}
    if bad:
        raise UsageError(f"unknown scale keys: {sorted(bad)}")
    return replace(base, **overrides)


def _fractions(text: str) -> tuple[float, ...]:
    try:
        out = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"bad fraction list {text!r}") from None
    if any(not 0 < f <= 1 for f in out):
        raise UsageError("fractions must lie in (0, 1]")
    return out


def cmd_sweep_labels(args):
    res = ex.label_sweep(args.seed, args.seeds, _scale(args), args.out, args.jobs, _fractions(args.fractions))
    print(res.summary())


def cmd_experiment(args):
    fn = ex.PRESETS[args.preset]
    kw = {}
    if args.preset == "label-sweep" and args.fractions:
        kw["fractions"] = _fractions(args.fractions)
    res = fn(seed=args.seed, n_seeds=args.seeds, scale=_scale(args), out=args.out, jobs=args.jobs, **kw)
    print(res.summary())
    print(f"results in {args.out / 'sweep.csv'}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    root = argparse.ArgumentParser(prog="decoupled-distill", description=__doc__.splitlines()[0],
                                   formatter_class=fmt)
    sub = root.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="render a synthetic shapes split", formatter_class=fmt)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--split", default="train", help="split name; separates random streams")
    p.add_argument("--shapes", nargs="+", default=["circle", "triangle"], choices=SHAPES,
                   help="shape kinds, in class-id order")
    p.add_argument("--domain", choices=["day", "night"], default="day", help="render domain")
    p.add_argument("--unlabeled", action="store_true", help="hide annotations")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("shift-domain", help="apply the night shift to a split", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="input dataset directory")
    p.add_argument("--shift", default="night", choices=["night"], help="shift kind")
    _add_common(p)
    p.set_defaults(func=cmd_shift_domain)

    p = sub.add_parser("train-teacher", help="supervised training of a detector", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="labeled dataset directory")
    p.add_argument("--val", type=Path, help="validation dataset directory")
    p.add_argument("--arch", choices=["teacher", "student"], default="teacher", help="model preset")
    p.add_argument("--num-classes", type=int, help="class count (default: inferred from labels)")
    _add_common(p)
    _add_train(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("pseudo-label", help="label images with a teacher's detections", formatter_class=fmt)
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    p.add_argument("--data", type=Path, required=True, help="image dataset directory")
    _add_common(p)
    _add_train(p)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("distill", help="train a student on pseudo labels only", formatter_class=fmt)
    p.add_argument("--pseudo", type=Path, required=True, help="pseudo-label dataset directory")
    p.add_argument("--teacher", type=Path, help="teacher checkpoint (needed for feature matching)")
    p.add_argument("--val", type=Path, help="validation dataset directory")
    _add_common(p)
    _add_train(p, feature_flag=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("finetune", help="fine-tune a student on labels", formatter_class=fmt)
    p.add_argument("--student", type=Path, required=True, help="student checkpoint")
    p.add_argument("--data", type=Path, required=True, help="labeled dataset directory")
    p.add_argument("--val", type=Path, help="validation dataset directory")
    _add_common(p)
    _add_train(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("merge-teachers", help="distill several teachers into one student",
                       formatter_class=fmt)
    p.add_argument("--teachers", type=Path, nargs="+", required=True, help="teacher checkpoints")
    p.add_argument("--class-maps", nargs="+",
                   help="per teacher, teacher:union class pairs such as 0:0,1:2 (default: stacked)")
    p.add_argument("--union-classes", type=int, help="union class count (default: from the maps)")
    p.add_argument("--data", type=Path, required=True, help="unlabeled dataset directory")
    p.add_argument("--labeled", type=Path, help="union-labeled dataset for fine-tuning")
    p.add_argument("--val", type=Path, help="validation dataset directory")
    p.add_argument("--ft-epochs", type=int, help="fine-tuning epochs (default: --epochs)")
    _add_common(p)
    _add_train(p)
    p.set_defaults(func=cmd_merge_teachers)

    p = sub.add_parser("eval", help="mAP@0.5 of predictions or a model", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="ground-truth dataset directory")
    p.add_argument("--pred", type=Path, help="prediction dataset directory")
    p.add_argument("--model", type=Path, help="checkpoint to run instead of --pred")
    p.add_argument("--iou", type=float, default=0.5, help="match threshold")
    p.add_argument("--score-thresh", type=float, default=0.05, help="model score cut-off")
    p.add_argument("--nms-iou", type=float, default=0.5, help="model NMS threshold")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-labels", help="supervised vs distilled across label fractions",
                       formatter_class=fmt)
    p.add_argument("--fractions", default="0.2,0.5,1.0", help="comma-separated label fractions")
    p.add_argument("--seeds", type=int, default=3, help="seeds per cell")
    p.add_argument("--scale", choices=sorted(ex.SCALES), default="full", help="data and epoch budget")
    _add_common(p)
    p.set_defaults(func=cmd_sweep_labels)

    p = sub.add_parser("experiment", help="run a named experiment preset", formatter_class=fmt)
    p.add_argument("preset", choices=sorted(ex.PRESETS), help="experiment preset")
    p.add_argument("--seeds", type=int, default=3, help="seeds per method")
    p.add_argument("--scale", choices=sorted(ex.SCALES), default="full", help="data and epoch budget")
    p.add_argument("--fractions", help="label fractions for label-sweep (default: 0.2,0.5,1.0)")
    _add_common(p)
    p.set_defaults(func=cmd_experiment)
    return root


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.print_usage(sys.stderr)
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - report, never crash with a traceback
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
