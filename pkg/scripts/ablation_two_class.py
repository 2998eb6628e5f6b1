"""Two-class comparison with every student variant sharing one teacher.

Trains the teacher once, then per seed: supervised, distill-only, distill then
fine-tune with and without feature matching, at 100% and 20% labels. This is
the run behind the distillation, feature-matching and label-efficiency trends.
"""
import argparse
import logging

from decoupled_distill import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--scale", choices=sorted(ex.SCALES), default="full")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = ex.two_class(args.seed, args.seeds, ex.SCALES[args.scale], args.out, args.jobs,
                       methods=("supervised", "UD", "UD+FT", "UD_noFM", "UD_noFM+FT"),
                       fractions=(1.0, 0.2))
    print(res.summary())
    sup = res.mean("supervised", 1.0)
    for method in ("UD+FT", "UD_noFM+FT"):
        for frac in (1.0, 0.2):
            print(f"{method}@{frac} - supervised@1.0 = {res.mean(method, frac) - sup:+.4f}")


if __name__ == "__main__":
    main()
