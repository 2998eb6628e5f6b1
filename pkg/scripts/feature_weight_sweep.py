"""Distill-only val mAP for several feature-matching weights.

Trains (or loads) the two-class teacher, pseudo-labels the unlabeled split once,
then runs the distillation stage per weight and prints val mAP50 per epoch.
Weight 0 keeps the feature path but gives it no gradient, and ``--no-bias-init``
starts the adaptation bias at zero.
"""
import argparse
import logging
import time

from decoupled_distill import experiments as ex
from decoupled_distill.detector import build_adaptation, build_model, load_checkpoint
from decoupled_distill.pipeline import distill_stage


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--weights", type=float, nargs="+", default=[1.0, 0.1, 0.01, 0.001])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", choices=sorted(ex.SCALES), default="full")
    p.add_argument("--teacher", help="teacher checkpoint; trained from scratch if omitted")
    p.add_argument("--no-bias-init", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)
    scale = ex.SCALES[args.scale]
    labeled, unlabeled, val = ex.two_class_data(args.seed, scale)
    if args.teacher:
        teacher = load_checkpoint(args.teacher)
    else:
        teacher, rec = ex.fit_teacher(labeled, val, scale, args.seed)
        print(f"teacher val mAP50 {rec.best_map:.3f}")
    pseudo = ex._pseudo(teacher, unlabeled, scale, args.seed)
    for w in args.weights:
        t0 = time.perf_counter()
        student = build_model("student", teacher.num_classes, seed=args.seed)
        adaptation = build_adaptation(student.feature_channels, teacher.feature_channels, args.seed)
        cfg = ex.train_config(scale, scale.ud_epochs, args.seed, loss_weights={"feature": w},
                              adapt_bias_init=not args.no_bias_init)
        _, rec = distill_stage(student, adaptation, teacher, pseudo, cfg, val)
        maps = " ".join(f"{e['val_mAP50']:.3f}" for e in rec.epochs)
        print(f"weight {w:g}: val mAP50 per epoch {maps} ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
