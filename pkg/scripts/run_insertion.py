"""Train one architecture on Insertion with desk defaults, then evaluate it.

    python scripts/run_insertion.py --arch MV_Dropout --seed 0
    python scripts/run_insertion.py --arch MV_Towers --seed 0 --skip-train

Writes runs/insertion/<arch>_seed<k>/{config.txt,metrics.csv,final.mvq,eval.csv,robustness.csv}.
"""

import argparse
import logging
import time
from pathlib import Path

from mvq import evaluation, trainer
from mvq.config import load_config

EVAL_EPISODES = 700
SUBSET_EPISODES = 200
EVAL_SEED = 0


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--arch", default="MV_Dropout")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--root", default="runs/insertion")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--skip-train", action="store_true")
    p.add_argument("--skip-robustness", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.root) / f"{args.arch}_seed{args.seed}"
    cfg = load_config(overrides=[f"arch={args.arch}", f"seed={args.seed}", "log_interval=1000",
                                 "checkpoint_interval=20000", *args.set])
    if not args.skip_train:
        t = time.time()
        trainer.run_training(cfg, out)
        logging.info("trained in %.0f s", time.time() - t)
    ckpt = out / "final.mvq"
    rep = evaluation.evaluate(ckpt, cfg.task, EVAL_EPISODES, seed=EVAL_SEED, cem_config=cfg.cem())
    (out / "eval.csv").write_text(evaluation.to_csv(evaluation.report_rows(rep)))
    logging.info("greedy success %.2f%% over %d episodes", rep.success_rate, rep.n_episodes)
    if not args.skip_robustness and cfg.arch.startswith("MV_"):
        rob = evaluation.robustness_matrix(ckpt, cfg.task, SUBSET_EPISODES, EVAL_SEED, cfg.cem())
        (out / "robustness.csv").write_text(evaluation.to_csv(evaluation.report_rows(rob)))
        logging.info("per subset %s", rob.per_subset)


if __name__ == "__main__":
    main()
