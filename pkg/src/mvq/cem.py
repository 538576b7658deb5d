"""Cross-entropy search for the greedy action of a learned Q-function.

The action space is hybrid: a Gaussian per displacement axis and an
independent Bernoulli per binary command (open, close, terminate). Each
iteration samples, sanitizes, scores, keeps the top elites and refits. The
answer is the best concrete sample seen, never the distribution mode.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import qnet
from .nn import QNetworkParams
from .qnet import Arch, ViewMask
from .render import MultiViewObservation
from .world import MAX_STEP_DISPLACEMENT, ActionCommand, sanitize_actions

STD_FLOOR = 1e-3
INITIAL_BINARY_PROB = 0.25

BatchQ = Callable[[np.ndarray], np.ndarray]


class OptimizerError(FloatingPointError):
    """Every candidate scored non-finite; the network has most likely diverged."""


@dataclass(frozen=True)
class CemConfig:
    n_samples: int = 64
    n_elites: int = 6
    n_iterations: int = 2
    initial_std: tuple[float, float, float] = (MAX_STEP_DISPLACEMENT / 2,) * 3
    epsilon_exploration: float = 0.0
    std_floor: float = STD_FLOOR
    initial_binary_prob: float = INITIAL_BINARY_PROB
    max_step_displacement: float = MAX_STEP_DISPLACEMENT

    def __post_init__(self):
        if not 1 <= self.n_elites <= self.n_samples:
            raise ValueError(f"need 1 <= n_elites <= n_samples, got {self.n_elites}, {self.n_samples}")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if not 0.0 <= self.epsilon_exploration <= 1.0:
            raise ValueError("epsilon_exploration must be a probability")
        if not 0.0 <= self.initial_binary_prob <= 1.0:
            raise ValueError("initial_binary_prob must be a probability")
        if self.std_floor <= 0 or len(self.initial_std) != 3 or min(self.initial_std) < self.std_floor:
            raise ValueError("initial_std must be a 3-vector with entries >= std_floor > 0")


@dataclass
class ActionDistribution:
    """Batched search distribution; leading axis indexes independent problems."""

    mean: np.ndarray
    std: np.ndarray
    probs: np.ndarray

    @classmethod
    def initial(cls, n: int, config: CemConfig) -> "ActionDistribution":
        return cls(np.zeros((n, 3)), np.tile(np.asarray(config.initial_std, dtype=np.float64), (n, 1)),
                   np.full((n, 3), config.initial_binary_prob))

    def sample(self, k: int, rng: np.random.Generator, max_step: float) -> np.ndarray:
        n = self.mean.shape[0]
        disp = self.mean[:, None, :] + self.std[:, None, :] * rng.standard_normal((n, k, 3))
        bits = (rng.random((n, k, 3)) < self.probs[:, None, :]).astype(np.float64)
        return sanitize_actions(np.concatenate([disp, bits], axis=-1), max_step)

    def refit(self, elites: np.ndarray, std_floor: float) -> "ActionDistribution":
        return ActionDistribution(elites[..., :3].mean(axis=1), np.maximum(elites[..., :3].std(axis=1), std_floor),
                                  elites[..., 3:].mean(axis=1))


def cem_maximize_batch(q: BatchQ, n: int, config: CemConfig, rng: np.random.Generator):
    """Run n independent searches at once.

    ``q`` maps candidate actions (n, K, 6) to scores (n, K). Returns the best
    sanitized actions (n, 6) and their scores (n,).
    """
    dist = ActionDistribution.initial(n, config)
    best_a = np.zeros((n, 6))
    best_q = np.full(n, -np.inf)
    seen = np.zeros(n, dtype=bool)
    rows = np.arange(n)[:, None]
    for _ in range(config.n_iterations):
        cand = dist.sample(config.n_samples, rng, config.max_step_displacement)
        scores = np.asarray(q(cand), dtype=np.float64)
        finite = np.isfinite(scores)
        seen |= finite.any(axis=1)
        scores = np.where(finite, scores, -np.inf)
        order = np.argsort(-scores, axis=1, kind="stable")
        top = order[:, 0]
        better = scores[rows[:, 0], top] > best_q
        best_q = np.where(better, scores[rows[:, 0], top], best_q)
        best_a[better] = cand[better, top[better]]
        dist = dist.refit(cand[rows, order[:, :config.n_elites]], config.std_floor)
    if not seen.all():
        raise OptimizerError(f"all candidate Q-values were non-finite for {int((~seen).sum())} of {n} searches")
    return best_a, best_q


def cem_maximize(q: Callable[[np.ndarray], np.ndarray], config: CemConfig = CemConfig(), seed=None):
    """Maximize ``q`` (maps (K, 6) actions to (K,) scores) for one observation.

    The returned score is q re-evaluated on the returned action alone, so it
    does not depend on how the backend batches rows.
    """
    rng = np.random.default_rng(seed)
    a, _ = cem_maximize_batch(lambda cand: np.asarray(q(cand[0]))[None, :], 1, config, rng)
    return ActionCommand.from_vector(a[0], config.max_step_displacement), float(np.asarray(q(a))[0])


class Mode(str, enum.Enum):
    greedy = "greedy"
    epsilon_greedy = "epsilon_greedy"


def random_actions(n: int, rng: np.random.Generator, max_step: float = MAX_STEP_DISPLACEMENT,
                   terminate_prob: float = 0.5) -> np.ndarray:
    """Uniform valid actions: box displacement, one of {none, open, close}, and a terminate coin.

    ``terminate_prob=0.5`` makes the draw uniform over all valid commands.
    """
    disp = rng.uniform(-max_step, max_step, (n, 3))
    grip = rng.integers(0, 3, n)
    out = np.zeros((n, 6))
    out[:, :3] = disp
    out[:, 3] = grip == 1
    out[:, 4] = grip == 2
    out[:, 5] = rng.random(n) < terminate_prob
    return out


def observation_arrays(arch: Arch, obs) -> tuple[np.ndarray, np.ndarray]:
    """(images (N, V, H, W, C), gripper (N,)) from one observation, a list, or a ready tuple."""
    if isinstance(obs, MultiViewObservation):
        obs = [obs]
    if isinstance(obs, tuple):
        images, grip = obs
    else:
        images, grip = qnet.stack_observations(obs)
    return images, np.asarray(grip)


def q_evaluator(arch: Arch | str, params: QNetworkParams, images: np.ndarray, grip: np.ndarray,
                mask: Optional[ViewMask] = None) -> BatchQ:
    arch = Arch(arch)
    if arch.value != params.arch:
        raise qnet.ContractViolation(f"parameters are for {params.arch}, not {arch.value}")
    qnet._check_views(arch, qnet.arch_config_of(params), images)
    return qnet.encode_state(params, images, grip, mask)


def select_actions(arch: Arch | str, params: QNetworkParams, obs, config: CemConfig = CemConfig(),
                   mode: Mode | str = Mode.greedy, seed=None, mask: Optional[ViewMask] = None,
                   terminate_prob: float = 0.5) -> np.ndarray:
    """Batched policy: returns sanitized (N, 6) actions for N observations."""
    mode = Mode(mode)
    rng = np.random.default_rng(seed)
    images, grip = observation_arrays(Arch(arch), obs)
    n = images.shape[0]
    # CEM draws first so greedy and epsilon=0 consume the same stream as cem_maximize
    q = q_evaluator(arch, params, images, grip, mask)
    out, _ = cem_maximize_batch(q, n, config, rng)
    if mode is Mode.epsilon_greedy and config.epsilon_exploration > 0:
        explore = rng.random(n) < config.epsilon_exploration
        rand = random_actions(n, rng, config.max_step_displacement, terminate_prob)
        out[explore] = rand[explore]
    return out


def select_action(arch: Arch | str, params: QNetworkParams, obs: MultiViewObservation, config: CemConfig = CemConfig(),
                  mode: Mode | str = Mode.greedy, seed=None, mask: Optional[ViewMask] = None,
                  terminate_prob: float = 0.5) -> ActionCommand:
    a = select_actions(arch, params, obs, config, mode, seed, mask, terminate_prob)[0]
    return ActionCommand.from_vector(a, config.max_step_displacement)


def max_q_next_batch(arch: Arch | str, params_target: QNetworkParams, images: np.ndarray, grip: np.ndarray,
                     config: CemConfig = CemConfig(), seed=None, mask: Optional[ViewMask] = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q = q_evaluator(arch, params_target, images, grip, mask)
    return cem_maximize_batch(q, images.shape[0], config, rng)[1]


def max_q_next(arch: Arch | str, params_target: QNetworkParams, next_obs: MultiViewObservation,
               config: CemConfig = CemConfig(), seed=None, mask: Optional[ViewMask] = None) -> float:
    """CEM estimate of max over a' of the target network at next_obs. Terminal handling is the caller's."""
    images, grip = observation_arrays(Arch(arch), next_obs)
    return float(max_q_next_batch(arch, params_target, images, grip, config, seed, mask)[0])
