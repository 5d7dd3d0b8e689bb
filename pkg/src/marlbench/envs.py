"""2D particle worlds: cooperative navigation and predator-prey pursuit.

Learners apply continuous 2D forces; prey follow a scripted flee policy and
landmarks never move. Integration is semi-implicit Euler with velocity
damping and a hard speed cap.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

SCENARIO_COOP_NAV = "coop-nav"
SCENARIO_PREDATOR_PREY = "predator-prey"
SCENARIOS = (SCENARIO_COOP_NAV, SCENARIO_PREDATOR_PREY)

KIND_LEARNER = 0
KIND_PREY = 1
KIND_LANDMARK = 2

KIND_NAMES = {KIND_LEARNER: "learner", KIND_PREY: "prey", KIND_LANDMARK: "landmark"}

ACT_DIM = 2


@dataclass
class EnvConfig:
    scenario: str
    n_learners: int
    n_prey: int
    n_landmarks: int
    dt: float = 0.1
    damping: float = 0.25
    max_speed: float = 1.0
    max_episode_length: int = 25
    world_halfwidth: float = 1.0
    entity_radius: float = 0.05
    collision_penalty: float = 1.0
    tag_reward: float = 10.0
    chase_shaping: float = 0.1
    seed: int = 0


def make_env_config(scenario: str, n_learners: int = 3, **overrides) -> EnvConfig:
    """Build a validated config with scenario-appropriate entity counts."""
    if scenario == SCENARIO_COOP_NAV:
        cfg = EnvConfig(scenario=scenario, n_learners=n_learners,
                        n_prey=0, n_landmarks=n_learners)
    elif scenario == SCENARIO_PREDATOR_PREY:
        cfg = EnvConfig(scenario=scenario, n_learners=n_learners,
                        n_prey=1, n_landmarks=0)
    else:
        raise ValueError(f"unknown scenario {scenario!r}, expected one of {SCENARIOS}")
    if overrides:
        cfg = replace(cfg, **overrides)
    validate_env_config(cfg)
    return cfg


def validate_env_config(cfg: EnvConfig) -> None:
    if cfg.scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {cfg.scenario!r}")
    if cfg.n_learners < 1:
        raise ValueError(f"need at least one learner, got {cfg.n_learners}")
    if cfg.n_prey < 0 or cfg.n_landmarks < 0:
        raise ValueError("entity counts must be non-negative")
    if cfg.scenario == SCENARIO_COOP_NAV and cfg.n_prey != 0:
        raise ValueError("coop-nav has no prey")
    if cfg.dt <= 0.0:
        raise ValueError(f"dt must be positive, got {cfg.dt}")
    if not 0.0 <= cfg.damping < 1.0:
        raise ValueError(f"damping must lie in [0, 1), got {cfg.damping}")
    if cfg.max_speed <= 0.0 or cfg.world_halfwidth <= 0.0 or cfg.entity_radius <= 0.0:
        raise ValueError("max_speed, world_halfwidth and entity_radius must be positive")
    if cfg.max_episode_length < 1:
        raise ValueError(f"max_episode_length must be >= 1, got {cfg.max_episode_length}")


@dataclass
class WorldState:
    pos: np.ndarray      # (E, 2)
    vel: np.ndarray      # (E, 2)
    radius: np.ndarray   # (E,)
    kind: np.ndarray     # (E,) int
    step_count: int
    rng: np.random.Generator = field(repr=False, default=None)

    @property
    def n_entities(self) -> int:
        return self.pos.shape[0]


def observation_dim(cfg: EnvConfig) -> int:
    """Own velocity and position, relative landmarks, relative other movables."""
    n_movable = cfg.n_learners + cfg.n_prey
    return 4 + 2 * cfg.n_landmarks + 2 * (n_movable - 1)


def _movable_count(cfg: EnvConfig) -> int:
    return cfg.n_learners + cfg.n_prey


def reset(cfg: EnvConfig, rng: np.random.Generator) -> tuple[WorldState, list[np.ndarray]]:
    """Place every entity uniformly in the square, at rest, and observe."""
    validate_env_config(cfg)
    n_entities = cfg.n_learners + cfg.n_prey + cfg.n_landmarks
    hw = cfg.world_halfwidth
    pos = rng.uniform(-hw, hw, size=(n_entities, 2))
    vel = np.zeros((n_entities, 2))
    radius = np.full(n_entities, cfg.entity_radius)
    kind = np.concatenate([
        np.full(cfg.n_learners, KIND_LEARNER),
        np.full(cfg.n_prey, KIND_PREY),
        np.full(cfg.n_landmarks, KIND_LANDMARK),
    ]).astype(np.int64)
    state = WorldState(pos=pos, vel=vel, radius=radius, kind=kind, step_count=0, rng=rng)
    return state, observations(state, cfg)


def observations(state: WorldState, cfg: EnvConfig) -> list[np.ndarray]:
    n = cfg.n_learners
    n_mov = _movable_count(cfg)
    landmarks = state.pos[n_mov:]
    obs = []
    for i in range(n):
        own = state.pos[i]
        parts = [state.vel[i], own]
        if cfg.n_landmarks:
            parts.append((landmarks - own).ravel())
        others = [state.pos[j] - own for j in range(n_mov) if j != i]
        if others:
            parts.append(np.concatenate(others))
        obs.append(np.concatenate(parts))
    return obs


def prey_policy(state: WorldState, prey_index: int) -> np.ndarray:
    """Unit-magnitude force straight away from the nearest learner.

    Ties go to the lowest-indexed learner; with no learners present, or a
    learner exactly on top of the prey, the force is zero.
    """
    if not 0 <= prey_index < state.n_entities:
        raise IndexError(f"entity {prey_index} out of range")
    if state.kind[prey_index] != KIND_PREY:
        raise ValueError(
            f"entity {prey_index} is {KIND_NAMES[int(state.kind[prey_index])]}, not prey"
        )
    learner_idx = np.nonzero(state.kind == KIND_LEARNER)[0]
    if learner_idx.size == 0:
        return np.zeros(2)
    own = state.pos[prey_index]
    dists = np.linalg.norm(state.pos[learner_idx] - own, axis=1)
    nearest = state.pos[learner_idx[int(np.argmin(dists))]]
    away = own - nearest
    norm = np.linalg.norm(away)
    if norm == 0.0:
        return np.zeros(2)
    return away / norm


def compute_rewards(state: WorldState, cfg: EnvConfig) -> np.ndarray:
    """Per-learner rewards evaluated on the post-integration state."""
    n = cfg.n_learners
    n_mov = _movable_count(cfg)
    learners = state.pos[:n]
    if cfg.scenario == SCENARIO_COOP_NAV:
        landmarks = state.pos[n_mov:]
        total = 0.0
        for lm in landmarks:
            total -= float(np.min(np.linalg.norm(learners - lm, axis=1)))
        overlaps = 0
        for i in range(n):
            for j in range(n):
                if i != j and _overlap(state, i, j):
                    overlaps += 1
        total -= cfg.collision_penalty * overlaps
        return np.full(n, total)
    rewards = np.zeros(n)
    prey_pos = state.pos[n:n_mov]
    if prey_pos.shape[0] == 0:
        return rewards
    for i in range(n):
        tags = sum(1 for j in range(n, n_mov) if _overlap(state, i, j))
        nearest = float(np.min(np.linalg.norm(prey_pos - learners[i], axis=1)))
        rewards[i] = cfg.tag_reward * tags - cfg.chase_shaping * nearest
    return rewards


def _overlap(state: WorldState, i: int, j: int) -> bool:
    dist = float(np.linalg.norm(state.pos[i] - state.pos[j]))
    return dist < float(state.radius[i] + state.radius[j])


def step(
    state: WorldState,
    actions: list[np.ndarray],
    cfg: EnvConfig,
) -> tuple[WorldState, list[np.ndarray], np.ndarray, bool]:
    """Advance the world one tick under the learners' joint action.

    Returns the mutated state, fresh observations, per-learner rewards and
    the time-limit done flag.
    """
    n = cfg.n_learners
    if len(actions) != n:
        raise ValueError(f"got {len(actions)} actions for {n} learners")
    n_mov = _movable_count(cfg)
    accel = np.zeros((state.n_entities, 2))
    for i, a in enumerate(actions):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (ACT_DIM,):
            raise ValueError(f"action {i} has shape {a.shape}, expected ({ACT_DIM},)")
        if np.any(np.abs(a) > 1.0):
            logger.warning("action %d outside [-1, 1], clamping: %s", i, a)
            a = np.clip(a, -1.0, 1.0)
        accel[i] = a
    for j in range(n, n_mov):
        accel[j] = prey_policy(state, j)

    mov = slice(0, n_mov)
    vel = (1.0 - cfg.damping) * state.vel[mov] + accel[mov] * cfg.dt
    speeds = np.linalg.norm(vel, axis=1)
    over = speeds > cfg.max_speed
    if np.any(over):
        vel[over] *= (cfg.max_speed / speeds[over])[:, None]
    state.vel[mov] = vel
    state.pos[mov] += vel * cfg.dt
    state.vel[n_mov:] = 0.0
    state.step_count += 1

    rewards = compute_rewards(state, cfg)
    done = state.step_count >= cfg.max_episode_length
    return state, observations(state, cfg), rewards, done


TRAJECTORY_HEADER = ["step", "entity", "kind", "x", "y", "vx", "vy", "reward"]


def trajectory_rows(state: WorldState, cfg: EnvConfig, rewards: np.ndarray | None) -> list[list]:
    """One CSV row per entity for the current step; rewards only for learners."""
    rows = []
    for e in range(state.n_entities):
        kind = int(state.kind[e])
        if rewards is not None and kind == KIND_LEARNER:
            rew = repr(float(rewards[e]))
        else:
            rew = ""
        rows.append([
            state.step_count, e, KIND_NAMES[kind],
            repr(float(state.pos[e, 0])), repr(float(state.pos[e, 1])),
            repr(float(state.vel[e, 0])), repr(float(state.vel[e, 1])),
            rew,
        ])
    return rows
