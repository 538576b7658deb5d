"""Kinematic block world for the Stacking I, Stacking II and Insertion tasks.

Blocks are axis-aligned cubes. A closing gripper attaches the nearest block
inside its grasp region; an opening gripper releases it and the block drops
straight down onto the highest surface under its center. There is no contact
dynamics, which keeps every episode deterministic given its seed and actions.

Frame: x points from the left bin to the right bin, y away from the robot,
z up. All lengths are meters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

Vec3 = tuple[float, float, float]

WORKSPACE_LO: Vec3 = (-0.4, -0.3, 0.0)
WORKSPACE_HI: Vec3 = (0.4, 0.3, 0.4)
BIN_SIZE = (0.3, 0.4)
NOMINAL_BINS: tuple[Vec3, Vec3] = ((-0.18, 0.0, 0.08), (0.18, 0.0, 0.08))
HOME_POSITION: Vec3 = (0.18, 0.0, 0.2)
GRIPPER_Z_MIN = 0.02

GRASP_RADIUS = 0.015
GRASP_HEIGHT = 0.02
MAX_STEP_DISPLACEMENT = 0.03

FIXTURE_SIZE = (0.24, 0.10, 0.04)
FIXTURE_HOLE_SPACING = 0.075
FIXTURE_HOLE_DEPTH = 0.03

PLACEMENT_ATTEMPTS = 1000
PLACEMENT_GAP = 0.005
BIN_MARGIN = 0.01
SUPPORT_EPS = 1e-6

LEFT, RIGHT = 0, 1

# Calibrated on 700 Insertion episodes to about 20% success.
SCRIPTED_NOISE = 0.016
SCRIPTED_RELEASE_TOLERANCE = 0.02
SCRIPTED_GRASP_TOLERANCE = 0.012


class Task(str, enum.Enum):
    StackingI = "StackingI"
    StackingII = "StackingII"
    Insertion = "Insertion"


class Color(str, enum.Enum):
    blue = "blue"
    orange = "orange"


class PlacementError(RuntimeError):
    """Raised when blocks cannot be placed without overlap inside their bin."""


@dataclass(frozen=True)
class TaskConfig:
    task: Task
    block_edge: float
    n_right_blocks: int
    hole_clearance: float = 0.0
    bin_noise_ranges: Vec3 = (0.025, 0.05, 0.05)
    max_episode_steps: int = 40
    step_penalty: float = 0.01
    success_reward: float = 1.0
    max_step_displacement: float = MAX_STEP_DISPLACEMENT
    grasp_radius: float = GRASP_RADIUS
    grasp_height: float = GRASP_HEIGHT

    def __post_init__(self):
        expected = TASK_GEOMETRY[Task(self.task)]
        actual = (self.block_edge, self.n_right_blocks, self.hole_clearance)
        if actual != expected:
            raise ValueError(f"{self.task} requires (block_edge, n_right_blocks, hole_clearance) = {expected}, got {actual}")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")
        if self.step_penalty < 0:
            raise ValueError("step_penalty must be nonnegative")


TASK_GEOMETRY = {
    Task.StackingI: (0.05, 1, 0.0),
    Task.StackingII: (0.038, 6, 0.0),
    Task.Insertion: (0.05, 3, 0.009),
}


def make_task_config(task: Task | str, **overrides) -> TaskConfig:
    task = Task(task)
    edge, n_right, clearance = TASK_GEOMETRY[task]
    return TaskConfig(task=task, block_edge=edge, n_right_blocks=n_right, hole_clearance=clearance, **overrides)


@dataclass(frozen=True)
class RewardSpec:
    gamma: float
    step_penalty: float
    success_reward: float

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    def reward(self, terminal: bool, success: bool) -> float:
        if terminal and success:
            return self.success_reward
        return -self.step_penalty


@dataclass(frozen=True)
class Block:
    position: Vec3
    edge_length: float
    color: Color
    attached: bool = False

    @property
    def bottom(self) -> float:
        return self.position[2] - self.edge_length / 2

    @property
    def top(self) -> float:
        return self.position[2] + self.edge_length / 2


@dataclass(frozen=True)
class Fixture:
    """Plate with three square holes in a row along x; the middle one is the target."""

    position: Vec3  # center of the top face
    hole_clearance: float
    size: Vec3 = FIXTURE_SIZE
    hole_spacing: float = FIXTURE_HOLE_SPACING
    hole_depth: float = FIXTURE_HOLE_DEPTH

    @property
    def top(self) -> float:
        return self.position[2]

    def hole_centers(self) -> list[Vec3]:
        x, y, z = self.position
        return [(x + k * self.hole_spacing, y, z) for k in (-1, 0, 1)]

    @property
    def middle_hole(self) -> Vec3:
        return self.hole_centers()[1]


@dataclass(frozen=True)
class WorldState:
    config: TaskConfig
    gripper_position: Vec3
    gripper_closed: bool
    blocks: tuple[Block, ...]
    bins: tuple[Vec3, Vec3]
    fixture: Optional[Fixture] = None
    step_count: int = 0
    grasp_offset: Vec3 = (0.0, 0.0, 0.0)  # block center minus gripper, while attached

    def __post_init__(self):
        n_attached = sum(b.attached for b in self.blocks)
        if n_attached > 1 or (n_attached and not self.gripper_closed):
            raise ValueError("at most one block may be attached, and only to a closed gripper")

    @property
    def attached_index(self) -> Optional[int]:
        for i, b in enumerate(self.blocks):
            if b.attached:
                return i
        return None


@dataclass(frozen=True)
class ActionCommand:
    displacement: Vec3 = (0.0, 0.0, 0.0)
    gripper_open: int = 0
    gripper_close: int = 0
    terminate: int = 0

    def to_vector(self) -> np.ndarray:
        return np.array([*self.displacement, self.gripper_open, self.gripper_close, self.terminate], dtype=np.float64)

    @classmethod
    def from_vector(cls, v: Sequence[float], max_step: float = MAX_STEP_DISPLACEMENT) -> "ActionCommand":
        v = sanitize_actions(np.asarray(v, dtype=np.float64)[None, :], max_step)[0]
        return cls(tuple(float(x) for x in v[:3]), int(v[3]), int(v[4]), int(v[5]))


def sanitize_actions(actions: np.ndarray, max_step: float = MAX_STEP_DISPLACEMENT) -> np.ndarray:
    """Clamp displacements, binarize commands at 0.5, and resolve open+close to open.

    Works on an (..., 6) array and returns a new array.
    """
    out = np.array(actions, dtype=np.float64, copy=True)
    out[..., :3] = np.clip(out[..., :3], -max_step, max_step)
    out[..., 3:] = (out[..., 3:] >= 0.5).astype(np.float64)
    both = (out[..., 3] > 0) & (out[..., 4] > 0)
    out[..., 4] = np.where(both, 0.0, out[..., 4])
    return out


# ---------------------------------------------------------------- geometry


def bin_contains(bin_center: Vec3, xy: Sequence[float], margin: float = 0.0) -> bool:
    return abs(xy[0] - bin_center[0]) <= BIN_SIZE[0] / 2 - margin and abs(xy[1] - bin_center[1]) <= BIN_SIZE[1] / 2 - margin


def _fixture_contains(fixture: Fixture, xy) -> bool:
    return abs(xy[0] - fixture.position[0]) <= fixture.size[0] / 2 and abs(xy[1] - fixture.position[1]) <= fixture.size[1] / 2


def support_height(state: WorldState, xy: Sequence[float], exclude: Optional[int] = None) -> float:
    """Height of the highest surface directly under the horizontal point ``xy``."""
    height = WORKSPACE_LO[2]
    for center in state.bins:
        if bin_contains(center, xy):
            height = max(height, center[2])
    fx = state.fixture
    if fx is not None and _fixture_contains(fx, xy):
        surface = fx.top
        for hx, hy, _ in fx.hole_centers():
            if abs(xy[0] - hx) < fx.hole_clearance and abs(xy[1] - hy) < fx.hole_clearance:
                surface = fx.top - fx.hole_depth
        height = max(height, surface)
    for i, b in enumerate(state.blocks):
        if i == exclude or b.attached:
            continue
        half = b.edge_length / 2
        if abs(xy[0] - b.position[0]) < half and abs(xy[1] - b.position[1]) < half:
            height = max(height, b.top)
    return height


def _settle(state: WorldState) -> WorldState:
    """Drop every free block onto its support, lowest blocks first."""
    blocks = list(state.blocks)
    order = sorted(range(len(blocks)), key=lambda i: (blocks[i].bottom, i))
    for i in order:
        b = blocks[i]
        if b.attached:
            continue
        tmp = replace(state, blocks=tuple(blocks))
        floor = support_height(tmp, b.position[:2], exclude=i)
        z = floor + b.edge_length / 2
        blocks[i] = replace(b, position=(b.position[0], b.position[1], z))
    return replace(state, blocks=tuple(blocks))


# ---------------------------------------------------------------- lifecycle


def _sample_in_bin(rng: np.random.Generator, center: Vec3, half_extent: tuple[float, float]) -> tuple[float, float]:
    hx = BIN_SIZE[0] / 2 - half_extent[0] - BIN_MARGIN
    hy = BIN_SIZE[1] / 2 - half_extent[1] - BIN_MARGIN
    return (center[0] + rng.uniform(-hx, hx), center[1] + rng.uniform(-hy, hy))


def _place_blocks(rng, n: int, center: Vec3, edge: float, taken: list[tuple[float, float]]) -> list[tuple[float, float]]:
    placed = []
    for _ in range(n):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            xy = _sample_in_bin(rng, center, (edge / 2, edge / 2))
            if all(max(abs(xy[0] - o[0]), abs(xy[1] - o[1])) >= edge + PLACEMENT_GAP for o in taken + placed):
                placed.append(xy)
                break
        else:
            raise PlacementError(f"could not place {n} blocks of edge {edge} in bin after {PLACEMENT_ATTEMPTS} attempts")
    return placed


def reset_episode(config: TaskConfig, seed) -> WorldState:
    rng = np.random.default_rng(seed)
    noise = np.asarray(config.bin_noise_ranges, dtype=np.float64)
    bins = tuple(
        tuple(float(c + rng.uniform(-r, r)) if r > 0 else float(c) for c, r in zip(nominal, noise))
        for nominal in NOMINAL_BINS
    )
    edge = config.block_edge
    colors = list(Color)
    blocks: list[Block] = []

    def add(xys, bin_center):
        for xy in xys:
            color = colors[int(rng.integers(len(colors)))]
            blocks.append(Block((float(xy[0]), float(xy[1]), bin_center[2] + edge / 2), edge, color))

    add(_place_blocks(rng, config.n_right_blocks, bins[RIGHT], edge, []), bins[RIGHT])
    fixture = None
    if config.task is Task.Insertion:
        fxy = _sample_in_bin(rng, bins[LEFT], (FIXTURE_SIZE[0] / 2, FIXTURE_SIZE[1] / 2))
        fixture = Fixture((float(fxy[0]), float(fxy[1]), bins[LEFT][2] + FIXTURE_SIZE[2]), config.hole_clearance)
    else:
        add(_place_blocks(rng, 1, bins[LEFT], edge, []), bins[LEFT])
    return WorldState(
        config=config,
        gripper_position=HOME_POSITION,
        gripper_closed=False,
        blocks=tuple(blocks),
        bins=bins,
        fixture=fixture,
    )


def _clamp_gripper(target: np.ndarray, state: WorldState) -> np.ndarray:
    lo = np.array([WORKSPACE_LO[0], WORKSPACE_LO[1], GRIPPER_Z_MIN])
    hi = np.array(WORKSPACE_HI)
    idx = state.attached_index
    if idx is not None:
        half = state.blocks[idx].edge_length / 2
        off = np.array(state.grasp_offset)
        lo = np.maximum(lo, np.array(WORKSPACE_LO) + half - off)
        hi = np.minimum(hi, np.array(WORKSPACE_HI) - half - off)
    return np.clip(target, lo, hi)


def _grasp_candidate(state: WorldState) -> Optional[int]:
    g = np.array(state.gripper_position)
    best, best_d = None, np.inf
    for i, b in enumerate(state.blocks):
        p = np.array(b.position)
        horizontal = float(np.hypot(*(p[:2] - g[:2])))
        vertical = abs(float(p[2] - g[2]))
        if horizontal < state.config.grasp_radius and vertical < state.config.grasp_height:
            d = float(np.linalg.norm(p - g))
            if d < best_d:
                best, best_d = i, d
    return best


def step(state: WorldState, action: ActionCommand) -> tuple[WorldState, float, bool]:
    cfg = state.config
    if state.step_count >= cfg.max_episode_steps:
        raise ValueError("episode already finished: step_count == max_episode_steps")
    a = ActionCommand.from_vector(action.to_vector(), cfg.max_step_displacement)

    target = np.array(state.gripper_position) + np.array(a.displacement)
    gripper = _clamp_gripper(target, state)
    blocks = list(state.blocks)
    idx = state.attached_index
    if idx is not None:
        pos = gripper + np.array(state.grasp_offset)
        blocks[idx] = replace(blocks[idx], position=tuple(float(v) for v in pos))
    state = replace(state, gripper_position=tuple(float(v) for v in gripper), blocks=tuple(blocks))

    if a.gripper_open and state.gripper_closed:
        blocks = tuple(replace(b, attached=False) for b in state.blocks)
        state = _settle(replace(state, blocks=blocks, gripper_closed=False, grasp_offset=(0.0, 0.0, 0.0)))
    elif a.gripper_close and not state.gripper_closed:
        cand = _grasp_candidate(state)
        if cand is None:
            state = replace(state, gripper_closed=True)
        else:
            b = state.blocks[cand]
            offset = tuple(float(p - g) for p, g in zip(b.position, state.gripper_position))
            blocks = list(state.blocks)
            blocks[cand] = replace(b, attached=True)
            state = _settle(replace(state, blocks=tuple(blocks), gripper_closed=True, grasp_offset=offset))

    state = replace(state, step_count=state.step_count + 1)
    terminal = bool(a.terminate) or state.step_count == cfg.max_episode_steps
    success = terminal and check_success(state, cfg)
    reward = RewardSpec(0.0, cfg.step_penalty, cfg.success_reward).reward(terminal, success)
    return state, reward, terminal


def check_success(state: WorldState, config: TaskConfig) -> bool:
    edge = config.block_edge
    left = state.bins[LEFT]
    free = [b for b in state.blocks if not b.attached and bin_contains(left, b.position[:2])]
    if config.task is Task.Insertion:
        fx = state.fixture
        if fx is None or not bin_contains(left, fx.position[:2]):
            return False
        hx, hy, _ = fx.middle_hole
        floor = fx.top - fx.hole_depth
        for b in free:
            if (
                abs(b.position[0] - hx) < fx.hole_clearance
                and abs(b.position[1] - hy) < fx.hole_clearance
                and abs(b.bottom - floor) < SUPPORT_EPS
            ):
                return True
        return False
    for upper in free:
        for lower in free:
            if upper is lower:
                continue
            offset = max(abs(upper.position[0] - lower.position[0]), abs(upper.position[1] - lower.position[1]))
            if abs(upper.bottom - lower.top) < SUPPORT_EPS and offset < edge / 2:
                return True
    return False


# ---------------------------------------------------------------- scripted demonstrations


@dataclass
class ScriptedPolicy:
    """Ground-truth servo controller with additive uniform displacement noise.

    ``noise`` is the half-width of the per-axis uniform noise; the default is
    calibrated so Insertion succeeds roughly one time in five.
    """

    noise: float = SCRIPTED_NOISE
    align_tolerance: float = SCRIPTED_RELEASE_TOLERANCE
    grasp_tolerance: float = SCRIPTED_GRASP_TOLERANCE
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __call__(self, state: WorldState) -> ActionCommand:
        return scripted_policy(state, state.config, self.rng, self.noise, self.align_tolerance, self.grasp_tolerance)


def _placed_count(state: WorldState) -> int:
    left = state.bins[LEFT]
    return sum(1 for b in state.blocks if not b.attached and bin_contains(left, b.position[:2]))


def _place_target(state: WorldState, config: TaskConfig) -> np.ndarray:
    """Where the carried block's center should be when the gripper opens."""
    if config.task is Task.Insertion:
        hx, hy, hz = state.fixture.middle_hole
        return np.array([hx, hy, hz + config.block_edge / 2 + 0.005])
    left = state.bins[LEFT]
    base = [b for b in state.blocks if not b.attached and bin_contains(left, b.position[:2])]
    lower = max(base, key=lambda b: b.top)
    return np.array([lower.position[0], lower.position[1], lower.top + config.block_edge / 2 + 0.005])


def scripted_policy(state: WorldState, config: TaskConfig, seed, noise: float = SCRIPTED_NOISE,
                    align_tolerance: float = SCRIPTED_RELEASE_TOLERANCE,
                    grasp_tolerance: float = SCRIPTED_GRASP_TOLERANCE) -> ActionCommand:
    """Servo toward the current subgoal from ground truth, then add uniform noise.

    Subgoals run approach, close, carry, align, open, terminate. The release is
    deliberately sloppy: the gripper opens as soon as the block is within
    ``align_tolerance`` of the target on both horizontal axes, and the noisy
    final displacement decides whether it lands inside the clearance.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = config.max_step_displacement
    g = np.array(state.gripper_position)
    n_initial_left = 0 if config.task is Task.Insertion else 1
    idx = state.attached_index

    if idx is None and not state.gripper_closed and _placed_count(state) > n_initial_left:
        return ActionCommand(terminate=1)

    if idx is None:
        if state.gripper_closed:
            return ActionCommand(gripper_open=1)
        right = state.bins[RIGHT]
        candidates = [b for b in state.blocks if bin_contains(right, b.position[:2])]
        if not candidates:
            return ActionCommand(terminate=1)
        target = min(candidates, key=lambda b: float(np.hypot(*(np.array(b.position[:2]) - g[:2]))))
        err = np.array(target.position) - g
        if np.hypot(*err[:2]) < grasp_tolerance and abs(err[2]) < grasp_tolerance:
            return ActionCommand(displacement=_noisy(np.zeros(3), rng, noise, m), gripper_close=1)
        return ActionCommand(displacement=_noisy(err, rng, noise, m))

    block = np.array(state.blocks[idx].position)
    err = _place_target(state, config) - block
    if np.all(np.abs(err[:2]) < align_tolerance):
        return ActionCommand(displacement=_noisy(np.zeros(3), rng, noise, m), gripper_open=1)
    return ActionCommand(displacement=_noisy(err, rng, noise, m))


def _noisy(d: np.ndarray, rng: np.random.Generator, noise: float, m: float) -> Vec3:
    d = np.clip(d, -m, m)
    if noise > 0:
        d = d + rng.uniform(-noise, noise, size=3)
    return tuple(float(v) for v in np.clip(d, -m, m))


def seed_sequence(seed) -> np.random.SeedSequence:
    """A SeedSequence for ``seed`` whose spawned children do not depend on earlier spawns of the argument."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(seed)


def rollout_scripted(config: TaskConfig, seed, noise: float = SCRIPTED_NOISE, **kw) -> tuple[WorldState, bool, int]:
    """Run one scripted episode without rendering; returns (final state, success, length)."""
    env_seed, pol_seed = seed_sequence(seed).spawn(2)
    state = reset_episode(config, env_seed)
    rng = np.random.default_rng(pol_seed)
    terminal = False
    reward = 0.0
    while not terminal:
        state, reward, terminal = step(state, scripted_policy(state, config, rng, noise, **kw))
    return state, reward == config.success_reward and check_success(state, config), state.step_count
