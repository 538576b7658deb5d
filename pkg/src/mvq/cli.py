"""Command-line entry point: ``mvq train|collect-demos|eval|robustness|compare``.

Results are CSV on stdout (or ``--out``). Exit codes: 0 success, 2 config
error, 3 training divergence, 4 worker failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import evaluation, render, trainer
from .cem import OptimizerError
from .config import ConfigError, ExperimentConfig, load_config
from .nn import TrainingDivergenceError
from .world import Task, make_task_config

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_WORKER = 4


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _cem_from(args) -> ExperimentConfig:
    return load_config(getattr(args, "config", None), args.set or [])


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set or [])
    result = trainer.run_training(cfg, args.out_dir, args.demo_log)
    _emit(evaluation.to_csv(result.metrics), args.out)
    return 0


def cmd_collect(args) -> int:
    task = make_task_config(args.task)
    eps = []
    for i in range(args.episodes):
        ep = trainer.collect_episode(trainer.Scripted(), task, trainer._episode_seed(args.seed, 1, i),
                                     resolution=args.resolution, with_depth=args.with_depth)
        if i == 0 and args.dump_raw:
            Path(args.dump_raw).mkdir(parents=True, exist_ok=True)
            for view in trainer._observation(ep.images[0], ep.gripper[0]).views:
                render.dump_raw(view, Path(args.dump_raw) / f"view{view.view_id}.raw")
        eps.append(ep)
    trainer.write_episodes(args.out, eps)
    rows = [{"episode": i, "length": len(e), "success": int(e.success)} for i, e in enumerate(eps)]
    sys.stdout.write(evaluation.to_csv(rows))
    return 0


def _checkpoint(arg: str):
    return evaluation.SCRIPTED if arg == evaluation.SCRIPTED else arg


def cmd_eval(args) -> int:
    cfg = _cem_from(args)
    subset = evaluation.parse_view_subset(args.views) if args.views else None
    report = evaluation.evaluate(_checkpoint(args.checkpoint), args.task, args.episodes, subset, args.seed, cfg.cem(),
                                 args.workers)
    _emit(evaluation.to_csv(evaluation.report_rows(report)), args.out)
    return 0


def cmd_robustness(args) -> int:
    cfg = _cem_from(args)
    report = evaluation.robustness_matrix(_checkpoint(args.checkpoint), args.task, args.episodes, args.seed, cfg.cem(),
                                          args.workers)
    _emit(evaluation.to_csv(evaluation.report_rows(report)), args.out)
    return 0


def cmd_compare(args) -> int:
    rows = evaluation.compare_architectures(evaluation.read_reports(args.reports), args.baseline)
    _emit(evaluation.to_csv(rows), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    tasks = [t.value for t in Task]

    t = sub.add_parser("train", help="run a training experiment")
    t.add_argument("--config", help="key = value experiment file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--out-dir", help="run directory (default: the config's out_dir)")
    t.add_argument("--demo-log", help="episode log to seed the buffer with instead of fresh demos")
    t.add_argument("--out", help="write the metrics CSV here instead of stdout")
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("collect-demos", help="record scripted episodes to an episode log")
    c.add_argument("--task", choices=tasks, required=True)
    c.add_argument("--episodes", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--resolution", type=int, default=render.IMAGE_RESOLUTION)
    c.add_argument("--with-depth", action="store_true")
    c.add_argument("--dump-raw", metavar="DIR", help="also dump the first observation as raw images")
    c.set_defaults(fn=cmd_collect)

    for name, fn, helptext in (("eval", cmd_eval, "greedy success rate of a checkpoint"),
                               ("robustness", cmd_robustness, "success over every view subset")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True, help=f"checkpoint file or '{evaluation.SCRIPTED}'")
        e.add_argument("--task", choices=tasks, required=True)
        e.add_argument("--episodes", type=int, required=True)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--workers", type=int, default=1)
        e.add_argument("--config", help="config file supplying cem_* keys")
        e.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a cem_* key")
        e.add_argument("--out")
        if name == "eval":
            e.add_argument("--views", help="view subset, e.g. All, Shoulder+Right, or 0,2")
        e.set_defaults(fn=fn)

    m = sub.add_parser("compare", help="failure-rate reduction across evaluation reports")
    m.add_argument("--reports", nargs="+", required=True)
    m.add_argument("--baseline", help="architecture tag of the baseline (default: first report)")
    m.add_argument("--out")
    m.set_defaults(fn=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergenceError, OptimizerError) as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except trainer.WorkerError as e:
        print(f"worker failure: {e}", file=sys.stderr)
        return EXIT_WORKER


if __name__ == "__main__":
    sys.exit(main())
