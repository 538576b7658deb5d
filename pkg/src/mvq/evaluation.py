"""Greedy-policy evaluation, view-subset robustness matrices and architecture comparisons."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.stats import binomtest

from . import nn, qnet, render
from .cem import CemConfig
from .config import ConfigError
from .nn import QNetworkParams
from .qnet import Arch, ViewMask
from .trainer import Learned, _episode_seed, collect_episode
from .world import SCRIPTED_NOISE, Task, make_task_config, rollout_scripted

SCRIPTED = "scripted"
EVAL_STREAM = 5


@dataclass(frozen=True)
class EvalReport:
    architecture: str
    task: str
    n_episodes: int
    success_rate: float  # percent, for the all-views (or requested) setting
    checkpoint: str
    seed: int
    per_subset: dict[str, float] = field(default_factory=dict)
    successes: int = 0
    ci_low: float = 0.0
    ci_high: float = 0.0
    view_subset: str = "All"

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 100.0:
            raise ValueError("success_rate is a percentage")

    @property
    def failure_rate(self) -> float:
        return 100.0 - self.success_rate


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion, as fractions."""
    ci = binomtest(successes, n).proportion_ci(confidence, "wilson")
    return float(ci.low), float(ci.high)


@dataclass
class _Policy:
    arch: Optional[Arch]
    params: Optional[QNetworkParams]
    label: str


def _load(checkpoint) -> _Policy:
    if isinstance(checkpoint, QNetworkParams):
        return _Policy(Arch(checkpoint.arch), checkpoint, checkpoint.meta.get("checkpoint_id", "in-memory"))
    if checkpoint == SCRIPTED:
        return _Policy(None, None, SCRIPTED)
    try:
        params = nn.load_params(checkpoint)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load checkpoint {checkpoint}: {e}") from None
    return _Policy(Arch(params.arch), params, str(checkpoint))


def _check_task(policy: _Policy, task: str) -> None:
    try:
        Task(task)
    except ValueError:
        raise ConfigError(f"unknown task {task!r}") from None
    if policy.params is not None:
        trained = policy.params.meta.get("extra", {}).get("task")
        if trained is not None and trained != Task(task).value:
            raise ConfigError(f"checkpoint was trained on {trained}, not {task}")


def _episode_successes(policy: _Policy, task: str, n_episodes: int, view_subset: Optional[ViewMask], seed: int,
                       cem_config: CemConfig, workers: int) -> list[bool]:
    cfg = make_task_config(task)
    if policy.params is None:
        def run(i):
            return rollout_scripted(cfg, _episode_seed(seed, EVAL_STREAM, i), SCRIPTED_NOISE)[1]
    else:
        arch, params = policy.arch, policy.params
        resolution = qnet.arch_config_of(params).resolution
        mask, zero = None, ()
        if view_subset is not None and arch.multi_view:
            if arch is Arch.MV_Dropout:
                mask = view_subset
            else:
                zero = tuple(i for i, s in enumerate(view_subset.selected) if not s)
        source = Learned(arch.value, params, 0.0, mask, zero)

        def run(i):
            return collect_episode(source, cfg, _episode_seed(seed, EVAL_STREAM, i), cem_config, resolution,
                                   arch.uses_depth).success
    if workers <= 1:
        return [run(i) for i in range(n_episodes)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(run, range(n_episodes)))


def evaluate(checkpoint, task: str, n_episodes: int, view_subset: Optional[ViewMask] = None, seed: int = 0,
             cem_config: CemConfig = CemConfig(), workers: int = 1) -> EvalReport:
    """Greedy success rate over n_episodes seeded episodes.

    ``checkpoint`` is a path, in-memory parameters, or ``"scripted"`` for the
    demonstration policy. Missing views are zero-filled for every
    multi-view architecture except MV_Dropout, which renormalizes over the
    views present; single-view architectures ignore the subset.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    policy = _load(checkpoint)
    _check_task(policy, task)
    if view_subset is not None and policy.arch is not None and policy.arch.multi_view:
        if len(view_subset.selected) != qnet.arch_config_of(policy.params).n_views:
            raise ConfigError("view subset length does not match the checkpoint's view count")
    wins = _episode_successes(policy, task, n_episodes, view_subset, seed, cem_config, workers)
    k = int(sum(wins))
    lo, hi = wilson_interval(k, n_episodes)
    label = view_subset.label() if view_subset is not None else "All"
    rate = 100.0 * k / n_episodes
    return EvalReport(policy.arch.value if policy.arch else SCRIPTED, Task(task).value, n_episodes, rate,
                      policy.label, seed, {label: rate}, k, 100 * lo, 100 * hi, label)


def robustness_matrix(checkpoint, task: str, n_episodes: int, seed: int = 0, cem_config: CemConfig = CemConfig(),
                      workers: int = 1) -> EvalReport:
    """Success for every nonempty view subset, largest subsets first."""
    policy = _load(checkpoint)
    if policy.arch is None or not policy.arch.multi_view:
        raise ConfigError("the robustness matrix needs a multi-view checkpoint")
    n_views = qnet.arch_config_of(policy.params).n_views
    all_report = None
    per = {}
    for mask in qnet.all_view_masks(n_views):
        r = evaluate(policy.params, task, n_episodes, mask, seed, cem_config, workers)
        per[mask.label()] = r.success_rate
        if all(mask.selected):
            all_report = r
    return EvalReport(all_report.architecture, all_report.task, n_episodes, all_report.success_rate, policy.label,
                      seed, per, all_report.successes, all_report.ci_low, all_report.ci_high, "All")


def failure_rate_reduction(base_failure: float, ours_failure: float) -> float:
    """Relative drop in failure rate, in percent: 100 * (base - ours) / base."""
    if base_failure <= 0:
        raise ValueError("baseline failure rate must be positive")
    return 100.0 * (base_failure - ours_failure) / base_failure


def compare_architectures(reports: Sequence[EvalReport], baseline: Optional[str] = None) -> list[dict]:
    """One row per report with its failure-rate reduction against the named baseline architecture."""
    if not reports:
        raise ConfigError("nothing to compare")
    tasks = {r.task for r in reports}
    if len(tasks) != 1:
        raise ConfigError(f"reports cover different tasks: {sorted(tasks)}")
    if len({r.seed for r in reports}) != 1 or len({r.n_episodes for r in reports}) != 1:
        raise ConfigError("reports must share the evaluation seed and episode count")
    base = reports[0] if baseline is None else next((r for r in reports if r.architecture == baseline), None)
    if base is None:
        raise ConfigError(f"baseline {baseline} not among the reports")
    rows = []
    for r in reports:
        rows.append({"architecture": r.architecture, "task": r.task, "success_rate": r.success_rate,
                     "failure_rate": r.failure_rate, "baseline": base.architecture,
                     "failure_reduction": failure_rate_reduction(base.failure_rate, r.failure_rate)})
    return rows


# ---------------------------------------------------------------- CSV

REPORT_FIELDS = ("architecture", "task", "checkpoint", "seed", "n_episodes", "view_subset", "successes",
                 "success_rate", "ci_low", "ci_high")


def report_rows(report: EvalReport) -> list[dict]:
    base = {k: getattr(report, k) for k in REPORT_FIELDS}
    if len(report.per_subset) <= 1:
        return [base]
    return [{**base, "view_subset": label, "success_rate": rate, "successes": "", "ci_low": "", "ci_high": ""}
            if label != "All" else base for label, rate in report.per_subset.items()]


def matrix_row(report: EvalReport) -> dict:
    """Wide form: one column per view subset."""
    return {"architecture": report.architecture, "task": report.task, "checkpoint": report.checkpoint,
            "seed": report.seed, "n_episodes": report.n_episodes, **report.per_subset}


def to_csv(rows: Iterable[dict]) -> str:
    rows = list(rows)
    buf = io.StringIO()
    if rows:
        cols = list(rows[0].keys())
        for r in rows[1:]:
            cols += [k for k in r if k not in cols]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def reports_from_csv(text: str) -> list[EvalReport]:
    """Inverse of writing ``report_rows``: one report per (architecture, checkpoint), keyed on the All row."""
    grouped: dict[tuple, list[dict]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        grouped.setdefault((row["architecture"], row["checkpoint"]), []).append(row)
    out = []
    for rows in grouped.values():
        main = next((r for r in rows if r["view_subset"] == "All"), rows[0])
        per = {r["view_subset"]: float(r["success_rate"]) for r in rows}

        def num(key, r=main):
            return float(r[key]) if r.get(key) not in (None, "") else 0.0
        out.append(EvalReport(main["architecture"], main["task"], int(main["n_episodes"]), float(main["success_rate"]),
                              main["checkpoint"], int(main["seed"]), per, int(num("successes")), num("ci_low"),
                              num("ci_high"), main["view_subset"]))
    return out


def read_reports(paths: Sequence[Union[str, Path]]) -> list[EvalReport]:
    out = []
    for p in paths:
        try:
            out += reports_from_csv(Path(p).read_text())
        except (OSError, KeyError, ValueError) as e:
            raise ConfigError(f"cannot read report {p}: {e}") from None
    return out


def parse_view_subset(text: str, n_views: int = 3) -> ViewMask:
    """"All", view names joined by "+" (e.g. "Shoulder+Right"), or comma-separated indices."""
    text = text.strip()
    if text.lower() == "all":
        return ViewMask.all(n_views)
    names = [n.lower() for n in render.VIEW_NAMES[:n_views]]
    picked = set()
    for part in text.replace(",", "+").split("+"):
        part = part.strip().lower()
        if part.isdigit() and int(part) < n_views:
            picked.add(int(part))
        elif part in names:
            picked.add(names.index(part))
        else:
            raise ConfigError(f"unknown view {part!r} in subset {text!r}")
    try:
        return ViewMask.only(n_views, *sorted(picked))
    except qnet.ContractViolation as e:
        raise ConfigError(str(e)) from None
