"""Off-policy Q-learning loop: episodes, replay, Bellman targets, learner, workers.

Observations are stored as uint8 (the renderer quantizes to k/255, so this
is lossless) and transitions are views into their episode arrays: sample t
of an episode is (images[t], actions[t], rewards[t], images[t+1]).
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import queue
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from . import cem, nn, qnet, render
from .cem import CemConfig
from .config import ExperimentConfig
from .nn import QNetworkParams, TrainingDivergenceError
from .qnet import Arch, ViewMask
from .render import CameraPose, MultiViewObservation, ViewImage
from .world import (SCRIPTED_NOISE, ActionCommand, ScriptedPolicy, TaskConfig, check_success, reset_episode, seed_sequence,
                    step as world_step)

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss", "buffer_episodes", "success_rate_recent", "episodes_per_hour")


class Source(str, enum.Enum):
    demo = "demo"
    policy = "policy"


class WorkerError(RuntimeError):
    """A collection or Bellman worker failed; the learner shut down cleanly."""


def _seed_json(seed):
    if isinstance(seed, np.random.SeedSequence):
        ent = seed.entropy
        return {"entropy": ent if isinstance(ent, int) else list(ent), "spawn_key": list(seed.spawn_key)}
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return None if seed is None else int(seed)


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(images) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------- episodes


@dataclass(frozen=True)
class Transition:
    obs: MultiViewObservation
    action: ActionCommand
    reward: float
    next_obs: MultiViewObservation
    terminal: bool
    source: Source


def _observation(images: np.ndarray, gripper: int) -> MultiViewObservation:
    views = tuple(ViewImage((images[i].astype(np.float32) / np.float32(255)), i) for i in range(images.shape[0]))
    return MultiViewObservation(views, bool(gripper))


@dataclass(frozen=True)
class EpisodeRecord:
    """One rollout; T transitions over T + 1 observations, the last one terminal."""

    images: np.ndarray  # (T+1, V, H, W, C) uint8
    gripper: np.ndarray  # (T+1,) uint8
    actions: np.ndarray  # (T, 6) float64
    rewards: np.ndarray  # (T,) float64
    success: bool
    source: Source
    task: str
    seed: object
    cameras: tuple[CameraPose, ...]

    def __post_init__(self):
        t = self.actions.shape[0]
        if t == 0:
            raise ValueError("an episode needs at least one transition")
        if self.images.shape[0] != t + 1 or self.gripper.shape != (t + 1,) or self.rewards.shape != (t,):
            raise ValueError("episode arrays disagree on length")
        if self.images.dtype != np.uint8:
            raise ValueError("episode images must be uint8")

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def terminals(self) -> np.ndarray:
        out = np.zeros(len(self), dtype=bool)
        out[-1] = True
        return out

    def transition(self, t: int) -> Transition:
        return Transition(_observation(self.images[t], self.gripper[t]), ActionCommand.from_vector(self.actions[t]),
                          float(self.rewards[t]), _observation(self.images[t + 1], self.gripper[t + 1]),
                          t == len(self) - 1, Source(self.source))

    @property
    def transitions(self) -> list[Transition]:
        return [self.transition(t) for t in range(len(self))]

    def equals(self, other: "EpisodeRecord") -> bool:
        arrays = ("images", "gripper", "actions", "rewards")
        return (all(getattr(self, a).dtype == getattr(other, a).dtype
                    and getattr(self, a).tobytes() == getattr(other, a).tobytes() for a in arrays)
                and (self.success, Source(self.source), self.task, _seed_json(self.seed), self.cameras)
                == (other.success, Source(other.source), other.task, _seed_json(other.seed), other.cameras))


@dataclass(frozen=True)
class Scripted:
    noise: float = SCRIPTED_NOISE


@dataclass(frozen=True)
class Learned:
    arch: str
    params: QNetworkParams
    epsilon: float = 0.0
    mask: Optional[ViewMask] = None
    zero_views: tuple[int, ...] = ()


PolicySource = Union[Scripted, Learned]


def collect_episode(source: PolicySource, config: TaskConfig, seed, cem_config: CemConfig = CemConfig(),
                    resolution: int = render.IMAGE_RESOLUTION, with_depth: bool = False,
                    terminate_prob: float = 0.5, nominal: Optional[Sequence[CameraPose]] = None,
                    camera_noise: float = render.CAMERA_NOISE_STD) -> EpisodeRecord:
    """Reset, perturb cameras, roll out to terminal and record every rendered observation.

    The seed is split into (environment, policy, cameras) streams, so a
    scripted episode visits the same states as ``rollout_scripted`` with the
    same seed.
    """
    env_ss, pol_ss, cam_ss = seed_sequence(seed).spawn(3)
    state = reset_episode(config, env_ss)
    cams = tuple(render.perturb_cameras(nominal or render.nominal_cameras(), cam_ss, camera_noise))
    pol_rng = np.random.default_rng(pol_ss)
    if isinstance(source, Scripted):
        policy = ScriptedPolicy(noise=source.noise, rng=pol_rng)
    else:
        ccfg = CemConfig(**{**cem_config.__dict__, "epsilon_exploration": source.epsilon})
        mode = cem.Mode.epsilon_greedy if source.epsilon > 0 else cem.Mode.greedy
    images, grips, actions, rewards = [], [], [], []
    terminal = False
    while True:
        obs = render.observe(state, cams, with_depth, resolution)
        images.append(to_uint8(obs.stacked()))
        grips.append(int(state.gripper_closed))
        if terminal:
            break
        if isinstance(source, Scripted):
            action = policy(state)
        else:
            x = images[-1][None].copy()
            for v in source.zero_views:
                x[:, v] = 0
            vec = cem.select_actions(source.arch, source.params, (x, np.array([grips[-1]], np.float32)), ccfg,
                                     mode, pol_rng, source.mask, terminate_prob)[0]
            action = ActionCommand.from_vector(vec, config.max_step_displacement)
        state, reward, terminal = world_step(state, action)
        actions.append(action.to_vector())
        rewards.append(reward)
    success = bool(terminal and rewards[-1] == config.success_reward and check_success(state, config))
    return EpisodeRecord(np.stack(images), np.array(grips, dtype=np.uint8), np.stack(actions), np.array(rewards),
                         success, Source.demo if isinstance(source, Scripted) else Source.policy,
                         config.task.value, seed, cams)


# ---------------------------------------------------------------- episode log
#
# A log is a sequence of records, each: b"MVQE", uint32 header length, UTF-8
# JSON header, uint64 payload length, payload. The header names every array
# with its dtype, shape and byte offset into the payload; floats in the header
# are written with repr precision, so the round trip is bit-exact.

LOG_MAGIC = b"MVQE"
_ARRAYS = ("images", "gripper", "actions", "rewards")


def _camera_json(c: CameraPose) -> dict:
    return {"position": list(c.position), "look_at": list(c.look_at), "up": list(c.up), "fov_degrees": c.fov_degrees}


def _camera_from_json(d: dict) -> CameraPose:
    return CameraPose(tuple(d["position"]), tuple(d["look_at"]), tuple(d["up"]), d["fov_degrees"])


def _seed_from_json(s):
    if isinstance(s, dict):
        return np.random.SeedSequence(s["entropy"], spawn_key=tuple(s["spawn_key"]))
    return tuple(s) if isinstance(s, list) else s


def encode_episode(ep: EpisodeRecord) -> bytes:
    payload = io.BytesIO()
    table = []
    for name in _ARRAYS:
        a = np.ascontiguousarray(getattr(ep, name))
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": payload.tell()})
        payload.write(a.tobytes())
    header = {"version": 1, "success": ep.success, "source": Source(ep.source).value, "task": ep.task,
              "seed": _seed_json(ep.seed), "cameras": [_camera_json(c) for c in ep.cameras], "arrays": table}
    hb = json.dumps(header).encode("utf-8")
    body = payload.getvalue()
    return LOG_MAGIC + struct.pack("<I", len(hb)) + hb + struct.pack("<Q", len(body)) + body


def decode_episode(fh) -> Optional[EpisodeRecord]:
    magic = fh.read(4)
    if not magic:
        return None
    if magic != LOG_MAGIC:
        raise ValueError("corrupt episode log: bad record magic")
    (hn,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(hn).decode("utf-8"))
    (pn,) = struct.unpack("<Q", fh.read(8))
    body = fh.read(pn)
    if len(body) != pn:
        raise ValueError("corrupt episode log: truncated payload")
    arrays = {}
    for a in header["arrays"]:
        dt = np.dtype(a["dtype"])
        n = int(np.prod(a["shape"])) * dt.itemsize
        arrays[a["name"]] = np.frombuffer(body, dtype=dt, count=int(np.prod(a["shape"])),
                                          offset=a["offset"]).astype(dt.newbyteorder("="), copy=True).reshape(a["shape"])
        assert a["offset"] + n <= pn
    return EpisodeRecord(arrays["images"], arrays["gripper"], arrays["actions"], arrays["rewards"],
                         bool(header["success"]), Source(header["source"]), header["task"],
                         _seed_from_json(header["seed"]), tuple(_camera_from_json(c) for c in header["cameras"]))


def write_episodes(path: str | Path, episodes: Iterable[EpisodeRecord], append: bool = False) -> int:
    n = 0
    with open(path, "ab" if append else "wb") as fh:
        for ep in episodes:
            fh.write(encode_episode(ep))
            n += 1
    return n


def iter_episodes(path: str | Path) -> Iterator[EpisodeRecord]:
    with open(path, "rb") as fh:
        while (ep := decode_episode(fh)) is not None:
            yield ep


def read_episodes(path: str | Path) -> list[EpisodeRecord]:
    return list(iter_episodes(path))


# ---------------------------------------------------------------- replay


@dataclass
class Batch:
    images: np.ndarray
    gripper: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_images: np.ndarray
    next_gripper: np.ndarray
    terminal: np.ndarray
    source: np.ndarray

    def __len__(self) -> int:
        return self.actions.shape[0]

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Batch":
        imgs, grip = qnet.stack_observations([t.obs for t in transitions])
        nimgs, ngrip = qnet.stack_observations([t.next_obs for t in transitions])
        return cls(imgs, grip, np.stack([t.action.to_vector() for t in transitions]),
                   np.array([t.reward for t in transitions]), nimgs, ngrip,
                   np.array([t.terminal for t in transitions]), np.array([Source(t.source).value for t in transitions]))


class ReplayBuffer:
    """Episode store with capacity eviction and uniform transition sampling.

    Eviction drops the oldest policy episode; demo episodes go only when no
    policy episode is left. Safe for concurrent producers and samplers.
    """

    def __init__(self, capacity_episodes: int = 2000, demo_fraction_target: float = 0.0):
        if capacity_episodes < 1:
            raise ValueError("capacity_episodes must be >= 1")
        self.capacity_episodes = capacity_episodes
        self.demo_fraction_target = demo_fraction_target  # recorded only; sampling stays uniform
        self._episodes: list[EpisodeRecord] = []
        self._cum: Optional[np.ndarray] = None
        self._lock = threading.Lock()
        self.n_added = 0

    def __len__(self) -> int:
        return len(self._episodes)

    @property
    def episodes(self) -> tuple[EpisodeRecord, ...]:
        with self._lock:
            return tuple(self._episodes)

    @property
    def n_transitions(self) -> int:
        with self._lock:
            return int(sum(len(e) for e in self._episodes))

    def add(self, episode: EpisodeRecord) -> Optional[EpisodeRecord]:
        """Insert and return the evicted episode, if any."""
        with self._lock:
            self._episodes.append(episode)
            self._cum = None
            self.n_added += 1
            if len(self._episodes) <= self.capacity_episodes:
                return None
            for i, ep in enumerate(self._episodes):
                if Source(ep.source) is Source.policy:
                    return self._episodes.pop(i)
            return self._episodes.pop(0)

    def extend(self, episodes: Iterable[EpisodeRecord]) -> None:
        for ep in episodes:
            self.add(ep)

    def sample_locations(self, n: int, rng: np.random.Generator) -> list[tuple[EpisodeRecord, int]]:
        """n (episode, t) pairs drawn uniformly over all stored transitions, with replacement."""
        with self._lock:
            if not self._episodes:
                raise ValueError("cannot sample from an empty replay buffer")
            if self._cum is None:
                self._cum = np.cumsum([len(e) for e in self._episodes])
            flat = rng.integers(0, int(self._cum[-1]), n)
            idx = np.searchsorted(self._cum, flat, side="right")
            starts = np.concatenate([[0], self._cum[:-1]])
            return [(self._episodes[i], int(f - starts[i])) for i, f in zip(idx, flat)]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        locs = self.sample_locations(batch_size, rng)
        return Batch(np.stack([e.images[t] for e, t in locs]), np.array([e.gripper[t] for e, t in locs], np.float32),
                     np.stack([e.actions[t] for e, t in locs]), np.array([e.rewards[t] for e, t in locs]),
                     np.stack([e.images[t + 1] for e, t in locs]),
                     np.array([e.gripper[t + 1] for e, t in locs], np.float32),
                     np.array([t == len(e) - 1 for e, t in locs]), np.array([Source(e.source).value for e, t in locs]))


# ---------------------------------------------------------------- learner


def bellman_targets(batch: Batch, arch: Arch | str, target_params: QNetworkParams, cem_config: CemConfig,
                    gamma: float, seed=None) -> np.ndarray:
    """r for terminal rows, r + gamma * max_a' Q_target(s', a') otherwise."""
    y = np.asarray(batch.rewards, dtype=np.float64).copy()
    live = ~np.asarray(batch.terminal, dtype=bool)
    if live.any():
        q = cem.max_q_next_batch(arch, target_params, batch.next_images[live], batch.next_gripper[live],
                                 cem_config, seed)
        y[live] += gamma * q
    if not np.all(np.isfinite(y)):
        raise TrainingDivergenceError("non-finite Bellman target")
    return y


def bellman_target(transition: Transition, target_params: QNetworkParams, cem_config: CemConfig = CemConfig(),
                   gamma: float = 0.9, seed=None) -> float:
    return float(bellman_targets(Batch.from_transitions([transition]), target_params.arch, target_params,
                                 cem_config, gamma, seed)[0])


@dataclass
class TrainState:
    online: QNetworkParams
    target: QNetworkParams
    step: int = 0
    velocity: dict = field(default_factory=dict)
    epsilon: float = 0.0
    last_sync: int = 0


def new_train_state(arch: Arch | str, seed=0, arch_config: qnet.ArchConfig = qnet.ArchConfig(),
                    dtype=np.float32) -> TrainState:
    online = qnet.init_params(arch, seed, arch_config, dtype)
    return TrainState(online, online.copy())


def huber(residual: np.ndarray, delta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise Huber loss and its derivative."""
    a = np.abs(residual)
    loss = np.where(a <= delta, 0.5 * residual ** 2, delta * (a - 0.5 * delta))
    return loss, np.clip(residual, -delta, delta)


def train_step(state: TrainState, batch: Union[Batch, Sequence[Transition]], targets: Sequence[float],
               learning_rate: float = 1e-3, momentum: float = 0.9, seed=None,
               huber_delta: float = 1.0) -> tuple[TrainState, float]:
    """One momentum-SGD step on the batch-mean Huber TD loss. MV_Dropout draws one view mask per call."""
    if not isinstance(batch, Batch):
        batch = Batch.from_transitions(batch)
    targets = np.asarray(targets, dtype=np.float64)
    if len(batch) != targets.shape[0]:
        raise ValueError(f"{len(batch)} transitions but {targets.shape[0]} targets")
    arch = Arch(state.online.arch)
    mask = qnet.sample_view_mask(qnet.arch_config_of(state.online).n_views, seed) if arch is Arch.MV_Dropout else None
    q, cache = qnet.q_forward(state.online, batch.images, batch.gripper, np.asarray(batch.actions)[:, None, :], mask)
    residual = q[:, 0].astype(np.float64) - targets
    losses, dres = huber(residual, huber_delta)
    loss = float(losses.mean())
    if not math.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss at step {state.step}")
    dq = (dres / len(batch)).astype(state.online.dtype)[:, None]
    grads = qnet.q_backward(state.online, cache, dq)
    online, velocity = nn.sgd_step(state.online, grads, learning_rate, momentum, state.velocity)
    return TrainState(online, state.target, state.step + 1, velocity, state.epsilon, state.last_sync), loss


def sync_target(state: TrainState) -> TrainState:
    return TrainState(state.online, state.online.copy(), state.step, state.velocity, state.epsilon, state.step)


def maybe_sync(state: TrainState, interval: int) -> TrainState:
    return sync_target(state) if state.step % interval == 0 else state


def epsilon_at(step: int, cfg: ExperimentConfig) -> float:
    horizon = cfg.epsilon_decay_fraction * cfg.max_gradient_steps
    frac = 1.0 if horizon <= 0 else min(1.0, step / horizon)
    return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac


# ---------------------------------------------------------------- orchestration


def save_checkpoint(state: TrainState, path: str | Path, cfg: Optional[ExperimentConfig] = None, **extra) -> Path:
    info = {"step": state.step, "epsilon": state.epsilon, "last_sync": state.last_sync, **extra}
    if cfg is not None:
        info["task"] = cfg.task
        info["seed"] = cfg.seed
    nn.save_params(state.online, path, info, state.velocity)
    return Path(path)


@dataclass
class TrainingResult:
    state: TrainState
    metrics: list[dict]
    checkpoint: Optional[Path]
    buffer: ReplayBuffer
    losses: list[float]


class _Stats:
    def __init__(self, window: int):
        self.window = window
        self.recent: list[bool] = []
        self.n_policy = 0
        self.lock = threading.Lock()

    def record(self, ep: EpisodeRecord) -> None:
        if Source(ep.source) is not Source.policy:
            return
        with self.lock:
            self.n_policy += 1
            self.recent.append(ep.success)
            del self.recent[:-self.window]

    def success_rate(self) -> float:
        with self.lock:
            return float(np.mean(self.recent)) if self.recent else float("nan")


def _episode_seed(root: int, stream: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root, spawn_key=(stream, index))


def seed_demos(cfg: ExperimentConfig, buffer: ReplayBuffer, demo_log: Optional[str | Path] = None) -> None:
    if demo_log:
        for ep in iter_episodes(demo_log):
            buffer.add(ep)
        return
    task = cfg.task_config()
    with_depth = Arch(cfg.arch).uses_depth
    for i in range(cfg.n_demo):
        buffer.add(collect_episode(Scripted(cfg.scripted_noise), task, _episode_seed(cfg.seed, 1, i), cfg.cem(),
                                   cfg.resolution, with_depth))


def run_training(cfg: ExperimentConfig, out_dir: Optional[str | Path] = None, demo_log: Optional[str | Path] = None,
                 write_files: bool = True) -> TrainingResult:
    """Seed the buffer with demos, then alternate collection and learning until max_gradient_steps.

    With ``cfg.deterministic`` (the default) one thread interleaves a
    collection episode every ``gradient_steps_per_episode`` learner steps and
    computes Bellman targets inline, which makes the run bit-reproducible.
    Otherwise n_actor collection threads and n_bellman target threads feed
    the learner through the buffer and a bounded queue.
    """
    out = Path(out_dir or cfg.out_dir)
    if write_files:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    state = new_train_state(cfg.arch, _episode_seed(cfg.seed, 0, 0), cfg.arch_config(), dtype)
    buffer = ReplayBuffer(cfg.capacity_episodes, cfg.demo_fraction_target)
    seed_demos(cfg, buffer, demo_log)
    log.info("buffer seeded with %d demo episodes", len(buffer))
    runner = _DeterministicLoop if cfg.deterministic else _ThreadedLoop
    return runner(cfg, state, buffer, out, write_files).run()


class _Loop:
    def __init__(self, cfg: ExperimentConfig, state: TrainState, buffer: ReplayBuffer, out: Path, write_files: bool):
        self.cfg, self.state, self.buffer, self.out, self.write_files = cfg, state, buffer, out, write_files
        self.task = cfg.task_config()
        self.cem_cfg = cfg.cem()
        self.with_depth = Arch(cfg.arch).uses_depth
        self.stats = _Stats(cfg.recent_window)
        self.metrics: list[dict] = []
        self.losses: list[float] = []
        self.window: list[float] = []
        self.t0 = time.monotonic()
        self.learner_rng = np.random.default_rng(_episode_seed(cfg.seed, 3, 0))
        self.metrics_fh = None
        self.writer = None
        if write_files:
            self.metrics_fh = open(out / "metrics.csv", "w", newline="")
            self.writer = csv.writer(self.metrics_fh)
            self.writer.writerow(METRICS_HEADER)

    def collect(self, index: int, params: QNetworkParams, epsilon: float) -> EpisodeRecord:
        ep = collect_episode(Learned(self.cfg.arch, params, epsilon), self.task, _episode_seed(self.cfg.seed, 2, index),
                             self.cem_cfg, self.cfg.resolution, self.with_depth, self.cfg.explore_terminate_prob)
        self.buffer.add(ep)
        self.stats.record(ep)
        return ep

    def targets(self, batch: Batch, target: QNetworkParams, rng) -> np.ndarray:
        return bellman_targets(batch, self.cfg.arch, target, self.cem_cfg, self.cfg.gamma, rng)

    def learn(self, batch: Batch, y: np.ndarray) -> None:
        cfg = self.cfg
        self.state.epsilon = epsilon_at(self.state.step, cfg)
        self.state, loss = train_step(self.state, batch, y, cfg.learning_rate, cfg.momentum, self.learner_rng,
                                      cfg.huber_delta)
        self.losses.append(loss)
        self.window.append(loss)
        self.state = maybe_sync(self.state, cfg.target_sync_interval)
        if self.state.step % cfg.log_interval == 0:
            self.log_row()
        if self.write_files and self.state.step % cfg.checkpoint_interval == 0:
            save_checkpoint(self.state, self.out / f"ckpt_{self.state.step:07d}.mvq", cfg)

    def log_row(self) -> None:
        hours = max(time.monotonic() - self.t0, 1e-9) / 3600.0
        row = {"step": self.state.step, "loss": float(np.mean(self.window)) if self.window else float("nan"),
               "buffer_episodes": len(self.buffer), "success_rate_recent": self.stats.success_rate(),
               "episodes_per_hour": self.stats.n_policy / hours}
        self.window = []
        self.metrics.append(row)
        if self.writer is not None:
            self.writer.writerow([row[k] for k in METRICS_HEADER])
            self.metrics_fh.flush()
        log.info("step %d loss %.5f buffer %d success %.3f", row["step"], row["loss"], row["buffer_episodes"],
                 row["success_rate_recent"])

    def finish(self, name: str = "final.mvq") -> TrainingResult:
        path = None
        if self.write_files:
            path = save_checkpoint(self.state, self.out / name, self.cfg)
            self.metrics_fh.close()
        return TrainingResult(self.state, self.metrics, path, self.buffer, self.losses)

    def abort(self, err: BaseException) -> None:
        if self.write_files:
            save_checkpoint(self.state, self.out / "partial.mvq", self.cfg, error=repr(err))
            (self.out / "error.txt").write_text(f"step {self.state.step}: {err!r}\n")
            self.metrics_fh.close()


class _DeterministicLoop(_Loop):
    def run(self) -> TrainingResult:
        cfg = self.cfg
        episodes = 0
        try:
            while self.state.step < cfg.max_gradient_steps:
                if cfg.n_actor > 0 and self.state.step % cfg.gradient_steps_per_episode == 0:
                    self.collect(episodes, self.state.online, epsilon_at(self.state.step, cfg))
                    episodes += 1
                batch = self.buffer.sample(cfg.batch_size, self.learner_rng)
                self.learn(batch, self.targets(batch, self.state.target, self.learner_rng))
        except Exception as e:
            self.abort(e)
            raise
        return self.finish()


class _ThreadedLoop(_Loop):
    """Actors and Bellman workers on threads; one learner on the calling thread."""

    def run(self) -> TrainingResult:
        cfg = self.cfg
        self.stop = threading.Event()
        self.errors: list[BaseException] = []
        self.snapshot = (self.state.online, self.state.target)  # swapped atomically by reference
        self.batches: queue.Queue = queue.Queue(maxsize=max(2, 2 * cfg.n_bellman))
        self.counter = iter(range(1 << 62))
        self.counter_lock = threading.Lock()
        threads = [threading.Thread(target=self._guard, args=(self._actor,), daemon=True) for _ in range(cfg.n_actor)]
        threads += [threading.Thread(target=self._guard, args=(self._bellman, i), daemon=True)
                    for i in range(max(1, cfg.n_bellman))]
        for t in threads:
            t.start()
        try:
            while self.state.step < cfg.max_gradient_steps:
                if self.errors:
                    raise WorkerError(f"worker failed: {self.errors[0]!r}") from self.errors[0]
                try:
                    batch, y = self.batches.get(timeout=0.5)
                except queue.Empty:
                    continue
                self.learn(batch, y)
                if self.state.last_sync == self.state.step:
                    self.snapshot = (self.state.online, self.state.target)
        except Exception as e:
            self.stop.set()
            self.abort(e)
            raise
        finally:
            self.stop.set()
            for t in threads:
                t.join(timeout=30)
        return self.finish()

    def _guard(self, fn, *args) -> None:
        try:
            fn(*args)
        except BaseException as e:  # surfaced to the learner, which shuts down
            self.errors.append(e)
            self.stop.set()

    def _actor(self) -> None:
        while not self.stop.is_set():
            with self.counter_lock:
                index = next(self.counter)
            self.collect(index, self.snapshot[0], epsilon_at(self.state.step, self.cfg))

    def _bellman(self, worker: int) -> None:
        rng = np.random.default_rng(_episode_seed(self.cfg.seed, 4, worker))
        while not self.stop.is_set():
            batch = self.buffer.sample(self.cfg.batch_size, rng)
            y = self.targets(batch, self.snapshot[1], rng)
            while not self.stop.is_set():
                try:
                    self.batches.put((batch, y), timeout=0.5)
                    break
                except queue.Full:
                    continue
