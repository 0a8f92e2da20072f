"""Deterministic 2D tabletop with a fixed drawer, two movable objects and an obstacle.

The world lives in the unit square. A drawer is mounted at the top edge and
opens downwards; its front sweeps a rectangle in front of it, and the drawer
cannot move while the obstacle sits inside that rectangle. The gripper moves
by bounded 2D displacements, grasps the nearest item within reach when closed
and drags the drawer handle along when it pulls.

Observations are not the raw state: every scene applies its own invertible
linear mix to the raw state concatenated with a few scene constants, so a
learner has to discover which directions carry task information.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from flap.errors import EpisodeOverError

STATE_DIM = 12
N_NUISANCE = 4
OBS_DIM = STATE_DIM + N_NUISANCE
ACTION_DIM = 4

NONE = -1
OBSTACLE = 2  # item index of the obstacle; objects are 0 and 1

MAX_STEP = 0.05
GRASP_RADIUS = 0.05
HANDLE_RADIUS = 0.05
DRAWER_INCREMENT = 0.1
DRAWER_CMD_DEADZONE = 0.5

DRAWER_X = 0.5
HANDLE_Y_CLOSED = 0.85
DRAWER_TRAVEL = 0.3
SWEEP_HALF_WIDTH = 0.12
SWEEP_Y_LOW = HANDLE_Y_CLOSED - DRAWER_TRAVEL - 0.05
SWEEP_Y_HIGH = HANDLE_Y_CLOSED
OBSTACLE_CLEARANCE = 0.08  # Task C goal: obstacle this far outside the sweep region

# action normalisation: policy-space actions live in [-1, 1]^4
ACTION_SCALE = np.array([MAX_STEP, MAX_STEP, 1.0, 1.0])

_HELD_CODE = {NONE: (0.0, 0.0), 0: (1.0, 0.0), 1: (0.0, 1.0), OBSTACLE: (1.0, 1.0)}


@dataclass
class WorldState:
    gripper_pos: np.ndarray
    gripper_closed: int = 0
    held_object: int = NONE
    drawer_frac: float = 0.0
    object_pos: np.ndarray = field(default_factory=lambda: np.full((2, 2), 0.5))
    obstacle_pos: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.2]))

    def copy(self) -> "WorldState":
        return WorldState(
            gripper_pos=self.gripper_pos.copy(),
            gripper_closed=int(self.gripper_closed),
            held_object=int(self.held_object),
            drawer_frac=float(self.drawer_frac),
            object_pos=self.object_pos.copy(),
            obstacle_pos=self.obstacle_pos.copy(),
        )

    def item_positions(self) -> np.ndarray:
        """Positions of object 0, object 1 and the obstacle, shape (3, 2)."""
        return np.vstack([self.object_pos, self.obstacle_pos[None]])

    def set_item(self, index: int, pos: np.ndarray) -> None:
        if index == OBSTACLE:
            self.obstacle_pos = np.asarray(pos, dtype=float).copy()
        else:
            self.object_pos[index] = pos

    def flatten(self) -> np.ndarray:
        held = _HELD_CODE[self.held_object]
        return np.array(
            [
                self.gripper_pos[0], self.gripper_pos[1],
                float(self.gripper_closed), self.drawer_frac,
                self.object_pos[0, 0], self.object_pos[0, 1],
                self.object_pos[1, 0], self.object_pos[1, 1],
                self.obstacle_pos[0], self.obstacle_pos[1],
                held[0], held[1],
            ]
        )

    @classmethod
    def unflatten(cls, vec: np.ndarray) -> "WorldState":
        vec = np.asarray(vec, dtype=float)
        code = (round(vec[10]), round(vec[11]))
        held = {v: k for k, v in _HELD_CODE.items()}[(float(code[0]), float(code[1]))]
        return cls(
            gripper_pos=vec[0:2].copy(),
            gripper_closed=int(round(vec[2])),
            held_object=held,
            drawer_frac=float(vec[3]),
            object_pos=vec[4:8].reshape(2, 2).copy(),
            obstacle_pos=vec[8:10].copy(),
        )

    def check_invariants(self) -> None:
        items = self.item_positions()
        assert np.all((self.gripper_pos >= 0.0) & (self.gripper_pos <= 1.0)), self.gripper_pos
        assert np.all((items >= 0.0) & (items <= 1.0)), items
        assert 0.0 <= self.drawer_frac <= 1.0, self.drawer_frac
        assert self.gripper_closed in (0, 1)
        assert self.held_object in (NONE, 0, 1, OBSTACLE)
        if self.held_object != NONE:
            assert np.array_equal(items[self.held_object], self.gripper_pos)


def handle_position(drawer_frac: float) -> np.ndarray:
    return np.array([DRAWER_X, HANDLE_Y_CLOSED - DRAWER_TRAVEL * drawer_frac])


def in_sweep_region(pos: np.ndarray) -> bool:
    return bool(
        abs(pos[0] - DRAWER_X) <= SWEEP_HALF_WIDTH and SWEEP_Y_LOW <= pos[1] <= SWEEP_Y_HIGH
    )


@dataclass(frozen=True)
class SceneTransform:
    """Per-scene observation nuisance: ``obs = mix @ concat(state, offsets)``."""

    scene_id: int
    mix_matrix: np.ndarray
    nuisance_offsets: np.ndarray

    @classmethod
    def identity(cls, scene_id: int = -1) -> "SceneTransform":
        return cls(scene_id, np.eye(OBS_DIM), np.zeros(N_NUISANCE))

    @classmethod
    def from_seed(cls, scene_id: int, dataset_seed: int, strength: float = 0.35) -> "SceneTransform":
        rng = np.random.default_rng([int(dataset_seed), int(scene_id), 0x5CE7E])
        perturb = rng.standard_normal((OBS_DIM, OBS_DIM)) / np.sqrt(OBS_DIM)
        offsets = rng.uniform(-1.0, 1.0, N_NUISANCE)
        scale = strength
        while True:
            mix = np.eye(OBS_DIM) + scale * perturb
            if np.linalg.cond(mix) <= 10.0:
                return cls(scene_id, mix, offsets)
            scale *= 0.8

    def inverse_state(self, obs: np.ndarray) -> np.ndarray:
        """Recover the raw state vector from an observation."""
        return np.linalg.solve(self.mix_matrix, np.asarray(obs, dtype=float))[:STATE_DIM]


def observe(state: WorldState, scene: SceneTransform) -> np.ndarray:
    raw = np.concatenate([state.flatten(), scene.nuisance_offsets])
    if scene.mix_matrix.shape != (raw.size, raw.size):
        raise RuntimeError(
            f"scene mix is {scene.mix_matrix.shape}, raw observation has {raw.size} entries"
        )
    return scene.mix_matrix @ raw


def is_success(state: WorldState, goal: WorldState, tol: float = 0.05) -> bool:
    """Item positions and drawer opening (as handle travel) all within ``tol``; gripper ignored."""
    item_err = np.linalg.norm(state.item_positions() - goal.item_positions(), axis=1)
    drawer_err = abs(state.drawer_frac - goal.drawer_frac) * DRAWER_TRAVEL
    return bool(np.all(item_err <= tol) and drawer_err <= tol)


class TaskId(str, enum.Enum):
    A = "A"  # open the drawer and move object 0 (order free)
    B = "B"  # move object 0, then object 1
    C = "C"  # clear the obstacle from in front of the drawer, then open it


@dataclass(frozen=True)
class TaskSpec:
    task_id: TaskId
    init_sampler_seed: int
    goal_state: WorldState
    scene: SceneTransform
    success_tol: float = 0.05
    max_steps: int = 100

    def goal_observation(self) -> np.ndarray:
        return observe(self.goal_state, self.scene)


def _free_spot(rng: np.random.Generator, avoid: list[np.ndarray], margin: float = 0.15) -> np.ndarray:
    while True:
        p = rng.uniform(0.1, 0.9, 2)
        if in_sweep_region(p):
            continue
        if all(np.linalg.norm(p - q) > margin for q in avoid):
            return p


def task_layout(task_id: TaskId, init_sampler_seed: int) -> tuple[WorldState, WorldState]:
    """Nominal initial state and goal state for a task instance."""
    task_id = TaskId(task_id)
    rng = np.random.default_rng([int(init_sampler_seed), ord(task_id.value)])
    placed: list[np.ndarray] = []
    cleared = None
    if task_id == TaskId.C:
        obstacle = np.array([DRAWER_X + rng.uniform(-0.06, 0.06), rng.uniform(0.62, 0.72)])
        # the goal slides the obstacle sideways until it is just clear of the sweep region
        side = 1.0 if obstacle[0] >= DRAWER_X else -1.0
        cleared = np.array([DRAWER_X + side * (SWEEP_HALF_WIDTH + OBSTACLE_CLEARANCE), obstacle[1]])
        placed.append(cleared)
    else:
        obstacle = _free_spot(rng, placed)
    placed.append(obstacle)
    o0 = _free_spot(rng, placed)
    placed.append(o0)
    o1 = _free_spot(rng, placed)
    placed.append(o1)
    init = WorldState(
        gripper_pos=np.array([0.5, 0.2]),
        object_pos=np.vstack([o0, o1]),
        obstacle_pos=obstacle,
    )
    goal = init.copy()
    if task_id == TaskId.A:
        goal.object_pos[0] = _free_spot(rng, placed)
        goal.drawer_frac = 1.0
        goal.gripper_pos = handle_position(1.0)
    elif task_id == TaskId.B:
        goal.object_pos[0] = _free_spot(rng, placed)
        placed.append(goal.object_pos[0])
        goal.object_pos[1] = _free_spot(rng, placed)
        goal.gripper_pos = goal.object_pos[1].copy()
    else:
        goal.obstacle_pos = cleared
        goal.drawer_frac = 1.0
        goal.gripper_pos = handle_position(1.0)
    return init, goal


def make_task(
    task_id: TaskId | str,
    scene: SceneTransform,
    init_sampler_seed: int = 0,
    max_steps: int = 100,
    success_tol: float = 0.05,
) -> TaskSpec:
    _, goal = task_layout(TaskId(task_id), init_sampler_seed)
    return TaskSpec(TaskId(task_id), init_sampler_seed, goal, scene, success_tol, max_steps)


def clamp_action(action) -> np.ndarray:
    """Clip an action to its bounds: displacement norm <= MAX_STEP, commands in [-1, 1]."""
    a = np.asarray(action, dtype=float).reshape(ACTION_DIM).copy()
    norm = np.hypot(a[0], a[1])
    if norm > MAX_STEP:
        a[:2] *= MAX_STEP / norm
    a[2:] = np.clip(a[2:], -1.0, 1.0)
    return a


def apply_action(state: WorldState, action: np.ndarray) -> WorldState:
    """Pure transition function on world states (no step budget bookkeeping)."""
    a = clamp_action(action)
    s = state.copy()
    s.gripper_pos = np.clip(s.gripper_pos + a[:2], 0.0, 1.0)
    if s.held_object != NONE:
        s.set_item(s.held_object, s.gripper_pos.copy())

    if a[2] > 0.0:
        s.gripper_closed = 1
        if s.held_object == NONE:
            dist = np.linalg.norm(s.item_positions() - s.gripper_pos, axis=1)
            # argmin returns the lowest index among ties
            nearest = int(np.argmin(dist))
            if dist[nearest] <= GRASP_RADIUS:
                s.held_object = nearest
                s.set_item(nearest, s.gripper_pos.copy())
    else:
        s.gripper_closed = 0
        s.held_object = NONE

    if abs(a[3]) > DRAWER_CMD_DEADZONE:
        handle = handle_position(s.drawer_frac)
        at_handle = np.linalg.norm(s.gripper_pos - handle) <= HANDLE_RADIUS
        if at_handle and not in_sweep_region(s.obstacle_pos):
            frac = round(min(1.0, max(0.0, s.drawer_frac + np.sign(a[3]) * DRAWER_INCREMENT)), 10)
            shift = handle_position(frac) - handle
            s.drawer_frac = frac
            s.gripper_pos = np.clip(s.gripper_pos + shift, 0.0, 1.0)
            if s.held_object != NONE:
                s.set_item(s.held_object, s.gripper_pos.copy())
    return s


class TabletopEnv:
    """Single-threaded environment instance."""

    def __init__(self):
        self.task: TaskSpec | None = None
        self.state: WorldState | None = None
        self.steps = 0

    def reset(self, task: TaskSpec, seed: int) -> np.ndarray:
        if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
            raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
        init, _ = task_layout(task.task_id, task.init_sampler_seed)
        rng = np.random.default_rng([int(task.init_sampler_seed), int(seed)])
        state = init.copy()
        state.gripper_pos = rng.uniform(0.1, 0.9, 2)
        state.object_pos = np.clip(state.object_pos + rng.uniform(-0.01, 0.01, (2, 2)), 0.0, 1.0)
        state.obstacle_pos = np.clip(state.obstacle_pos + rng.uniform(-0.01, 0.01, 2), 0.0, 1.0)
        state.check_invariants()
        self.task = task
        self.state = state
        self.steps = 0
        return observe(state, task.scene)

    def reset_to(self, state: WorldState, task: TaskSpec) -> np.ndarray:
        """Start an episode from an explicit world state (used by the data scripts)."""
        state = state.copy()
        state.check_invariants()
        self.task = task
        self.state = state
        self.steps = 0
        return observe(state, task.scene)

    def step(self, action) -> np.ndarray:
        if self.task is None or self.state is None:
            raise RuntimeError("reset() must be called before step()")
        if self.steps >= self.task.max_steps:
            raise EpisodeOverError(f"episode over after {self.steps} steps")
        a = np.asarray(action, dtype=float)
        if a.shape != (ACTION_DIM,) or not np.all(np.isfinite(a)):
            raise ValueError(f"action must be {ACTION_DIM} finite numbers, got {action!r}")
        self.state = apply_action(self.state, a)
        self.state.check_invariants()
        self.steps += 1
        return observe(self.state, self.task.scene)

    @property
    def done(self) -> bool:
        return self.task is not None and self.steps >= self.task.max_steps

    def success(self) -> bool:
        return is_success(self.state, self.task.goal_state, self.task.success_tol)
