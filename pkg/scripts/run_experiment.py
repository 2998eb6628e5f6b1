"""Run one experiment preset and print the per-method summary.

    python scripts/run_experiment.py two-class --seeds 3 --out runs/two_class
    python scripts/run_experiment.py day-night --scale small --out runs/dn
"""
import argparse
import logging

from decoupled_distill import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("preset", choices=sorted(ex.PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--scale", choices=sorted(ex.SCALES), default="full")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = ex.PRESETS[args.preset](seed=args.seed, n_seeds=args.seeds, scale=ex.SCALES[args.scale],
                                  out=args.out, jobs=args.jobs)
    print(res.summary())


if __name__ == "__main__":
    main()
