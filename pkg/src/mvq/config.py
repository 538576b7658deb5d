"""Experiment configuration as a flat key=value text file.

Lines look like ``learning_rate = 0.001``; ``#`` starts a comment. Every
field of ExperimentConfig is a key, CEM settings carry a ``cem_`` prefix,
and command-line ``--set key=value`` pairs override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .cem import CemConfig
from .qnet import Arch, ArchConfig
from .world import SCRIPTED_NOISE, Task, TaskConfig, make_task_config


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    arch: str = Arch.MV_Dropout.value
    task: str = Task.Insertion.value
    seed: int = 0
    resolution: int = 32
    n_views: int = 3
    dtype: str = "float32"

    # world and reward
    max_episode_steps: int = 40
    step_penalty: float = 0.01
    success_reward: float = 1.0
    gamma: float = 0.9
    scripted_noise: float = SCRIPTED_NOISE

    # learner
    batch_size: int = 32
    learning_rate: float = 1e-3
    momentum: float = 0.9
    max_gradient_steps: int = 200_000
    target_sync_interval: int = 500
    huber_delta: float = 1.0

    # replay and data collection
    capacity_episodes: int = 2000
    demo_fraction_target: float = 0.0
    n_demo: int = 300
    gradient_steps_per_episode: int = 10
    epsilon_start: float = 0.5
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.5
    explore_terminate_prob: float = 0.5

    # workers and bookkeeping
    n_actor: int = 1
    n_bellman: int = 1
    deterministic: bool = True
    log_interval: int = 100
    checkpoint_interval: int = 10_000
    recent_window: int = 100
    out_dir: str = "runs/default"

    # CEM
    cem_n_samples: int = 64
    cem_n_elites: int = 6
    cem_n_iterations: int = 2
    cem_initial_std: tuple[float, float, float] = CemConfig().initial_std
    cem_epsilon_exploration: float = 0.0
    cem_std_floor: float = CemConfig().std_floor
    cem_initial_binary_prob: float = CemConfig().initial_binary_prob

    def __post_init__(self):
        try:
            Arch(self.arch)
            Task(self.task)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, not {self.dtype}")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        for name in ("batch_size", "max_gradient_steps", "target_sync_interval", "capacity_episodes",
                     "log_interval", "checkpoint_interval", "gradient_steps_per_episode", "recent_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_demo < 0 or self.n_actor < 0 or self.n_bellman < 0:
            raise ConfigError("n_demo, n_actor and n_bellman must be >= 0")
        for name in ("epsilon_start", "epsilon_end", "epsilon_decay_fraction", "explore_terminate_prob",
                     "demo_fraction_target"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        try:
            self.cem()
            self.task_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def cem(self) -> CemConfig:
        return CemConfig(self.cem_n_samples, self.cem_n_elites, self.cem_n_iterations, tuple(self.cem_initial_std),
                         self.cem_epsilon_exploration, self.cem_std_floor, self.cem_initial_binary_prob)

    def task_config(self) -> TaskConfig:
        return make_task_config(self.task, max_episode_steps=self.max_episode_steps,
                                step_penalty=self.step_penalty, success_reward=self.success_reward)

    def arch_config(self) -> ArchConfig:
        return ArchConfig(n_views=self.n_views, resolution=self.resolution)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(repr(x) for x in v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = getattr(ExperimentConfig(), name)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw.replace("_", ""))
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_pairs(lines: Iterable[str]) -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        out[key] = _coerce(key, value)
    return out


def load_config(path: Optional[str | Path] = None, overrides: Iterable[str] = (),
                base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Read ``path`` (if given) over ``base`` and apply ``key=value`` overrides last."""
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        values.update(parse_pairs(text.splitlines()))
    values.update(parse_pairs(overrides))
    return dataclasses.replace(base or ExperimentConfig(), **values)


def config_from_mapping(values: Mapping[str, str]) -> ExperimentConfig:
    return load_config(overrides=[f"{k}={v}" for k, v in values.items()])
