"""Scripted privileged-information policy and offline dataset generation.

The scripts read the true world state (never the observation) and chain a few
primitives: reach a point, grasp an item, carry and place it, or slide the
drawer to a target opening. Every executed action carries a little Gaussian
noise so the data is not perfectly optimal.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flap import env as E
from flap.dataset import INCOMPLETE, Trajectory, save_dataset

log = logging.getLogger(__name__)

PRIMITIVE_TIMEOUT = 50
IDLE_ACTION = np.array([0.0, 0.0, -1.0, 0.0])
RETREAT_PROB = 0.5
GRASP_CLOSE_RADIUS = 1.5  # the scripted grasp approaches with the gripper already closed


class PrimitiveKind(str, enum.Enum):
    REACH = "REACH"
    GRASP = "GRASP"
    PLACE = "PLACE"
    SLIDE_DRAWER = "SLIDE_DRAWER"


@dataclass(frozen=True)
class PrimitiveScript:
    kind: PrimitiveKind
    target: tuple  # 2D position, or (drawer fraction,) for SLIDE_DRAWER
    tolerance: float = 0.02
    item: int = E.NONE  # item to grasp/place (0, 1 or OBSTACLE)

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        t = np.asarray(self.target, dtype=float)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError(f"target {self.target} outside the workspace")


@dataclass(frozen=True)
class DatasetConfig:
    n_trajectories: int = 2000
    n_scenes: int = 6
    target_scene_id: int = 0
    holdout_drawer_in_target: bool = True
    seed: int = 0
    noise_std: float = 0.01
    settle_steps: int = 5  # idle steps appended once the script has finished

    def __post_init__(self):
        if self.n_trajectories <= 0:
            raise ValueError("n_trajectories must be positive")
        if self.settle_steps < 0 or self.noise_std < 0:
            raise ValueError("settle_steps and noise_std must be non-negative")
        if not 0 <= self.target_scene_id < self.n_scenes:
            raise ValueError("target_scene_id must be < n_scenes")


def _toward(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d = np.asarray(dst, dtype=float) - src
    n = np.hypot(d[0], d[1])
    return d * (E.MAX_STEP / n) if n > E.MAX_STEP else d


def primitive_action(state: E.WorldState, script: PrimitiveScript) -> np.ndarray:
    """Proportional controller for one primitive, clamped to the action bounds."""
    g = state.gripper_pos
    holding = state.held_object != E.NONE
    a = np.zeros(E.ACTION_DIM)
    kind = PrimitiveKind(script.kind)
    if kind == PrimitiveKind.REACH:
        target = np.asarray(script.target, dtype=float)
        if np.linalg.norm(target - g) > script.tolerance:
            a[:2] = _toward(g, target)
        a[2] = 1.0 if holding else -1.0
    elif kind == PrimitiveKind.GRASP:
        target = state.item_positions()[script.item]
        a[:2] = _toward(g, target)
        a[2] = 1.0 if np.linalg.norm(target - g) <= script.tolerance else -1.0
    elif kind == PrimitiveKind.PLACE:
        target = np.asarray(script.target, dtype=float)
        if np.linalg.norm(target - g) > script.tolerance:
            a[:2] = _toward(g, target)
            a[2] = 1.0
        else:
            a[2] = -1.0
    else:
        frac = float(script.target[0])
        handle = E.handle_position(state.drawer_frac)
        if np.linalg.norm(handle - g) > 0.8 * E.HANDLE_RADIUS:
            a[:2] = _toward(g, handle)
        else:
            a[3] = np.sign(frac - state.drawer_frac)
        a[2] = -1.0
    return E.clamp_action(a)


def primitive_done(state: E.WorldState, script: PrimitiveScript) -> bool:
    kind = PrimitiveKind(script.kind)
    if kind == PrimitiveKind.REACH:
        return np.linalg.norm(np.asarray(script.target) - state.gripper_pos) <= script.tolerance
    if kind == PrimitiveKind.GRASP:
        return state.held_object == script.item
    if kind == PrimitiveKind.PLACE:
        pos = state.item_positions()[script.item]
        return state.held_object == E.NONE and np.linalg.norm(pos - np.asarray(script.target)) <= 2 * script.tolerance
    return abs(state.drawer_frac - float(script.target[0])) < 0.05


# -- task templates -------------------------------------------------------------

PICK_TEMPLATES = ("pick_place_object0", "pick_place_object1", "pick_place_obstacle")
DRAWER_TEMPLATES = ("open_drawer", "close_drawer")
ALL_TEMPLATES = PICK_TEMPLATES + DRAWER_TEMPLATES


def _spot(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.1, 0.9, 2)


def _free_spot(rng: np.random.Generator, avoid: list[np.ndarray]) -> np.ndarray:
    while True:
        p = _spot(rng)
        if not E.in_sweep_region(p) and all(np.linalg.norm(p - q) > 0.12 for q in avoid):
            return p


def random_layout(template: str, rng: np.random.Generator) -> E.WorldState:
    """Initial world state for a scripted episode."""
    p_blocked = 0.15 if template in DRAWER_TEMPLATES else 0.3
    placed: list[np.ndarray] = []
    if rng.random() < p_blocked:
        obstacle = np.array([E.DRAWER_X + rng.uniform(-0.08, 0.08), rng.uniform(0.58, 0.78)])
    else:
        obstacle = _free_spot(rng, placed)
    placed.append(obstacle)
    o0 = _free_spot(rng, placed)
    placed.append(o0)
    o1 = _free_spot(rng, placed)
    if template == "open_drawer":
        drawer = 0.0
    elif template == "close_drawer":
        drawer = 1.0
    else:
        drawer = 1.0 if rng.random() < 0.3 else 0.0
    return E.WorldState(
        gripper_pos=_spot(rng),
        drawer_frac=drawer,
        object_pos=np.vstack([o0, o1]),
        obstacle_pos=obstacle,
    )


def template_scripts(template: str, state: E.WorldState, rng: np.random.Generator) -> list[PrimitiveScript]:
    if template in PICK_TEMPLATES:
        item = PICK_TEMPLATES.index(template)
        item = E.OBSTACLE if item == 2 else item
        pos = state.item_positions()[item]
        scripts = [
            PrimitiveScript(PrimitiveKind.GRASP, tuple(pos), tolerance=GRASP_CLOSE_RADIUS, item=item),
            PrimitiveScript(PrimitiveKind.PLACE, tuple(_spot(rng)), tolerance=0.02, item=item),
        ]
    elif template in DRAWER_TEMPLATES:
        frac = 1.0 if template == "open_drawer" else 0.0
        scripts = [
            PrimitiveScript(PrimitiveKind.REACH, tuple(E.handle_position(state.drawer_frac)), tolerance=0.04),
            PrimitiveScript(PrimitiveKind.SLIDE_DRAWER, (frac,), tolerance=0.05),
        ]
    else:
        raise ValueError(f"unknown template {template!r}")
    if rng.random() < RETREAT_PROB:
        scripts.append(PrimitiveScript(PrimitiveKind.REACH, tuple(_spot(rng)), tolerance=0.03))
    return scripts


def script_episode(
    env: E.TabletopEnv,
    template: str,
    rng: np.random.Generator,
    noise_std: float = 0.01,
    settle_steps: int = 0,
) -> Trajectory:
    """Run one scripted episode from the env's current state.

    Stops when every primitive has completed, when a primitive makes no
    progress for ``PRIMITIVE_TIMEOUT`` steps (flagged incomplete) or at the
    task step budget.
    """
    scripts = template_scripts(template, env.state, rng)
    obs = [observe_current(env)]
    actions = []
    flags = 0
    idx, on_current = 0, 0
    while idx < len(scripts) and not env.done:
        if primitive_done(env.state, scripts[idx]):
            idx += 1
            on_current = 0
            continue
        if on_current >= PRIMITIVE_TIMEOUT:
            flags |= INCOMPLETE
            break
        a = primitive_action(env.state, scripts[idx])
        a = E.clamp_action(a + rng.normal(0.0, noise_std, E.ACTION_DIM))
        obs.append(env.step(a))
        actions.append(a)
        on_current += 1
    if idx < len(scripts) and not flags & INCOMPLETE:
        flags |= INCOMPLETE
    if not flags & INCOMPLETE:
        # rest with the gripper open so the data also shows holding a reached goal
        for _ in range(min(settle_steps, env.task.max_steps - env.steps)):
            a = E.clamp_action(IDLE_ACTION + rng.normal(0.0, noise_std, E.ACTION_DIM))
            obs.append(env.step(a))
            actions.append(a)
    if not actions:
        # already satisfied at reset; record one idle step so the trajectory is usable
        a = IDLE_ACTION.copy()
        obs.append(env.step(a))
        actions.append(a)
    return Trajectory(np.array(obs), np.array(actions), scene_id=env.task.scene.scene_id, flags=flags)


def observe_current(env: E.TabletopEnv) -> np.ndarray:
    return E.observe(env.state, env.task.scene)


def scene_transforms(cfg: DatasetConfig) -> list[E.SceneTransform]:
    return [E.SceneTransform.from_seed(s, cfg.seed) for s in range(cfg.n_scenes)]


def episode_plan(cfg: DatasetConfig) -> list[tuple[int, str]]:
    """(scene, template) for every trajectory: round-robin over scenes, then templates."""
    plan = []
    per_scene_counter = [0] * cfg.n_scenes
    for i in range(cfg.n_trajectories):
        scene = i % cfg.n_scenes
        if scene == cfg.target_scene_id and cfg.holdout_drawer_in_target:
            templates = PICK_TEMPLATES
        else:
            templates = ALL_TEMPLATES
        plan.append((scene, templates[per_scene_counter[scene] % len(templates)]))
        per_scene_counter[scene] += 1
    return plan


def generate_trajectories(cfg: DatasetConfig) -> list[Trajectory]:
    scenes = scene_transforms(cfg)
    env = E.TabletopEnv()
    trajs = []
    for i, (scene_id, template) in enumerate(episode_plan(cfg)):
        rng = np.random.default_rng([cfg.seed, i])
        task = E.TaskSpec(E.TaskId.A, 0, E.WorldState(np.zeros(2)), scenes[scene_id], max_steps=100)
        env.reset_to(random_layout(template, rng), task)
        trajs.append(script_episode(env, template, rng, cfg.noise_std, cfg.settle_steps))
    n_bad = sum(t.incomplete for t in trajs)
    log.info("generated %d trajectories (%d incomplete)", len(trajs), n_bad)
    return trajs


def generate_offline_dataset(cfg: DatasetConfig, path) -> Path:
    trajs = generate_trajectories(cfg)
    path = Path(path)
    save_dataset(trajs, path, obs_dim=E.OBS_DIM, action_dim=E.ACTION_DIM)
    return path
