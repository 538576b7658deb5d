"""Scripted-policy success rate on Insertion over a grid of noise levels.

    python scripts/calibrate_scripted.py --episodes 700 --noise 0.008 0.012 0.016 0.02

Prints one CSV row per noise level with a Wilson 95% interval.
"""

import argparse
import sys

import numpy as np

from mvq import evaluation
from mvq.trainer import _episode_seed
from mvq.world import SCRIPTED_NOISE, make_task_config, rollout_scripted


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--task", default="Insertion")
    p.add_argument("--episodes", type=int, default=700)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, nargs="+", default=[SCRIPTED_NOISE])
    args = p.parse_args()
    cfg = make_task_config(args.task)
    rows = []
    for noise in args.noise:
        runs = [rollout_scripted(cfg, _episode_seed(args.seed, evaluation.EVAL_STREAM, i), noise)
                for i in range(args.episodes)]
        wins = sum(r[1] for r in runs)
        lo, hi = evaluation.wilson_interval(wins, args.episodes)
        rows.append({"noise": noise, "episodes": args.episodes, "success_rate": 100 * wins / args.episodes,
                     "ci_low": 100 * lo, "ci_high": 100 * hi,
                     "median_length": float(np.median([r[2] for r in runs]))})
    sys.stdout.write(evaluation.to_csv(rows))


if __name__ == "__main__":
    main()
