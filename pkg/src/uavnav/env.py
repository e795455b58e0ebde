"""Episodic navigation environment: observations, rewards, termination.

The environment owns the simulated flight loop: it advances the simplified
dynamics, renders the forward depth camera, assembles the policy observation
(a 14-dim state block plus a representation memory slot), evaluates the
terminal cases in fixed priority order, and can roll out full episodes for
dataset collection.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import (
    CameraIntrinsics,
    CameraPose,
    DepthImage,
    load_depth_image,
    render_depth,
    save_depth_image,
)
from .dynamics import Action, DynamicsConfig, UavState, step as dynamics_step
from .geometry import Vec3, World, load_world, save_world, signed_distance
from .util import derived_rng

STATE_DIM = 14
D_HOR_FLOOR = 1e-3
V_NORM_EPS = 1e-3


class Termination(enum.Enum):
    RUNNING = "Running"
    ARRIVED = "Arrived"
    COLLISION = "Collision"
    OUT_OF_BOUNDS = "OutOfBounds"
    TIMEOUT = "Timeout"


class EpisodeFinishedError(RuntimeError):
    """Stepping an episode past its terminal transition."""


@dataclass(frozen=True)
class RewardConfig:
    r_arrive: float = 10.0
    r_collision: float = -10.0
    r_exceed: float = -5.0
    # All weights are negative so every progress term penalizes.
    lambda_d: float = -0.5
    lambda_z: float = -0.2
    lambda_v: float = -0.1
    lambda_dir: float = -0.1
    lambda_ang: float = -0.05
    lambda_lat: float = -0.05
    d_min: float = 0.5
    v_max: float = 2.0
    # Literal form of the vertical term (no absolute value); off by default
    # because a signed term would reward flying below the goal.
    signed_dz: bool = False

    def __post_init__(self):
        if not (self.r_arrive > 0 > self.r_collision):
            raise ValueError("need r_arrive > 0 > r_collision")
        if not self.d_min > 0 or not self.v_max > 0:
            raise ValueError("d_min and v_max must be positive")


@dataclass(frozen=True)
class EnvConfig:
    reward: RewardConfig = field(default_factory=RewardConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    d_uav: float = 0.3
    max_steps: int = 300


@dataclass
class Observation:
    """Policy input: goal-relative state block plus a memory slot."""

    log_d_hor: float
    d_z: float
    d_norm: np.ndarray
    v_world: np.ndarray
    euler: np.ndarray
    omega_body: np.ndarray
    memory: np.ndarray

    def state_vector(self) -> np.ndarray:
        v = np.concatenate(
            [
                [self.log_d_hor, self.d_z],
                self.d_norm,
                self.v_world,
                self.euler,
                self.omega_body,
            ]
        )
        assert v.shape == (STATE_DIM,)
        return v

    def vector(self) -> np.ndarray:
        return np.concatenate([self.state_vector(), self.memory])


@dataclass
class StepOutcome:
    observation: Observation
    reward: float
    termination: Termination


def make_observation(state: UavState, goal: Vec3, memory: np.ndarray) -> Observation:
    """Goal-relative observation block; the horizontal distance is floored
    at 1 mm before the log and the direction guard defaults to +x."""
    p = state.position
    dx, dy, dz = goal.x - p.x, goal.y - p.y, goal.z - p.z
    d_hor = max(math.hypot(dx, dy), D_HOR_FLOOR)
    full = math.sqrt(dx * dx + dy * dy + dz * dz)
    if full > 1e-12:
        d_norm = np.array([dx, dy, dz]) / full
    else:
        d_norm = np.array([1.0, 0.0, 0.0])
    return Observation(
        log_d_hor=math.log(d_hor),
        d_z=dz,
        d_norm=d_norm,
        v_world=state.velocity.as_array(),
        euler=state.euler(),
        omega_body=state.omega_body(),
        memory=np.asarray(memory, dtype=np.float64),
    )


def progress_reward(
    state: UavState, prev_state: UavState, goal: Vec3, cfg: RewardConfig
) -> float:
    """Dense shaping: distance, overspeed, misalignment, spin, and
    lateral/backward motion terms, each gated or floored as configured."""
    del prev_state  # the shaping is a pure function of the current state
    p = state.position
    dx, dy, dz = goal.x - p.x, goal.y - p.y, goal.z - p.z
    d_hor = max(math.hypot(dx, dy), D_HOR_FLOOR)
    full = math.sqrt(dx * dx + dy * dy + dz * dz)
    d_norm = np.array([dx, dy, dz]) / full if full > 1e-12 else np.array([1.0, 0, 0])

    v = state.velocity.as_array()
    speed = float(np.linalg.norm(v))
    v_hor = float(math.hypot(v[0], v[1]))
    if speed < V_NORM_EPS:
        # Loitering: charge the worst-case misalignment.
        dir_term = float(np.abs(d_norm).sum())
    else:
        dir_term = float(np.abs(d_norm - v / speed).sum())

    vb = state.velocity_body()
    dz_term = dz if cfg.signed_dz else abs(dz)
    return (
        cfg.lambda_d * math.log(d_hor)
        + cfg.lambda_z * dz_term
        + cfg.lambda_v * max(0.0, v_hor - cfg.v_max) * v_hor
        + cfg.lambda_dir * dir_term
        + cfg.lambda_ang * float(np.linalg.norm(state.omega_body()))
        + cfg.lambda_lat * (abs(vb[1]) + max(0.0, -vb[0]))
    )


def _classify(state: UavState, world: World, cfg: EnvConfig, steps: int):
    """Terminal-case priority: Arrived > Collision > OutOfBounds > Timeout."""
    p = state.position
    g = world.goal
    dist = math.sqrt((g.x - p.x) ** 2 + (g.y - p.y) ** 2 + (g.z - p.z) ** 2)
    if dist < cfg.reward.d_min:
        return Termination.ARRIVED, cfg.reward.r_arrive
    if signed_distance(world, p) < cfg.d_uav / 2.0:
        return Termination.COLLISION, cfg.reward.r_collision
    lo, hi = world.config.bounds_min, world.config.bounds_max
    inside = (
        lo.x <= p.x <= hi.x and lo.y <= p.y <= hi.y and lo.z <= p.z <= hi.z
    )
    if not inside:
        return Termination.OUT_OF_BOUNDS, cfg.reward.r_exceed
    if steps >= cfg.max_steps:
        return Termination.TIMEOUT, cfg.reward.r_exceed
    return Termination.RUNNING, None


class ZeroMemory:
    """Placeholder memory adapter emitting a constant zero vector."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def reset(self):
        pass

    def update(self, raw: DepthImage) -> np.ndarray:
        return np.zeros(self.dim)


class NavigationEnv:
    """One episode at a time over a fixed world.

    A memory adapter (reset/update) turns each rendered raw depth frame into
    the observation's memory slot; the default emits zeros so the env is
    usable before any representation exists.
    """

    def __init__(
        self,
        world: World,
        cfg: EnvConfig = EnvConfig(),
        intr: CameraIntrinsics = CameraIntrinsics(),
        memory: ZeroMemory | None = None,
    ):
        self.world = world
        self.cfg = cfg
        self.intr = intr
        self.memory = memory if memory is not None else ZeroMemory()
        self.state: UavState | None = None
        self.steps = 0
        self.done = True
        self.last_frame: DepthImage | None = None

    def _observe(self) -> Observation:
        pose = CameraPose(self.state.position, self.state.yaw)
        self.last_frame = render_depth(self.world, pose, self.intr)
        mem = self.memory.update(self.last_frame)
        return make_observation(self.state, self.world.goal, mem)

    def reset(self) -> StepOutcome:
        start, goal = self.world.start, self.world.goal
        yaw = math.atan2(goal.y - start.y, goal.x - start.x)
        self.state = UavState(start, Vec3(0.0, 0.0, 0.0), yaw, 0.0)
        self.steps = 0
        self.memory.reset()
        term, terminal_reward = _classify(self.state, self.world, self.cfg, 0)
        self.done = term is not Termination.RUNNING
        obs = self._observe()
        return StepOutcome(obs, terminal_reward or 0.0, term)

    def step(self, action: Action) -> StepOutcome:
        if self.done or self.state is None:
            raise EpisodeFinishedError("episode already terminated; reset() first")
        prev = self.state
        self.state = dynamics_step(prev, action, self.cfg.dynamics)
        self.steps += 1
        term, terminal_reward = _classify(self.state, self.world, self.cfg, self.steps)
        if term is Termination.RUNNING:
            reward = progress_reward(self.state, prev, self.world.goal, self.cfg.reward)
        else:
            reward = terminal_reward
            self.done = True
        obs = self._observe()
        return StepOutcome(obs, float(reward), term)


@dataclass
class EpisodeRecord:
    """Time-indexed (frame, state, action, reward, termination) tuples."""

    frames: list
    states: list
    actions: list
    rewards: list
    terminations: list
    world: World
    seed: int

    def __len__(self):
        return len(self.frames)

    def validate(self):
        n = len(self.frames)
        assert all(
            len(x) == n
            for x in (self.states, self.actions, self.rewards, self.terminations)
        ), "per-step lists must be equally long"
        for t in self.terminations[:-1]:
            assert t is Termination.RUNNING
        return self


def rollout_episode(
    policy,
    env: NavigationEnv,
    rng: np.random.Generator,
    seed: int,
    frame_budget: int | None = None,
) -> EpisodeRecord:
    """Roll one episode, recording the pre-action frame for every step."""
    outcome = env.reset()
    record = EpisodeRecord([], [], [], [], [], env.world, seed)
    while not env.done:
        if frame_budget is not None and len(record) >= frame_budget:
            break
        frame = env.last_frame
        state = env.state
        action = policy(outcome.observation, rng)
        outcome = env.step(action)
        record.frames.append(frame)
        record.states.append(state)
        record.actions.append(action)
        record.rewards.append(outcome.reward)
        record.terminations.append(outcome.termination)
    return record


DEFAULT_EPISODES = 200
DEFAULT_FRAME_CAP = 10_000


def collect_dataset(
    policy,
    worlds,
    episodes: int = DEFAULT_EPISODES,
    cap_frames: int = DEFAULT_FRAME_CAP,
    cfg: EnvConfig = EnvConfig(),
    intr: CameraIntrinsics = CameraIntrinsics(),
    memory_factory=None,
    master_seed: int = 0,
) -> list:
    """Roll the stage-1 policy over the given worlds and store raw frames.

    Episode i runs in worlds[i % len(worlds)] with its own seed stream
    derived from (master_seed, i), so results do not depend on scheduling.
    Collection stops at the episode count or the total frame cap.
    """
    records = []
    total = 0
    for ep in range(episodes):
        if total >= cap_frames:
            break
        world = worlds[ep % len(worlds)]
        env = NavigationEnv(
            world,
            cfg,
            intr,
            memory=memory_factory() if memory_factory else None,
        )
        rng = derived_rng(master_seed, ep)
        record = rollout_episode(
            policy, env, rng, seed=ep, frame_budget=cap_frames - total
        )
        total += len(record)
        records.append(record)
    return records


def _state_to_json(s: UavState) -> dict:
    return {
        "p": [s.position.x, s.position.y, s.position.z],
        "v": [s.velocity.x, s.velocity.y, s.velocity.z],
        "yaw": s.yaw,
        "yaw_rate": s.yaw_rate,
    }


def _state_from_json(d: dict) -> UavState:
    return UavState(
        Vec3(*d["p"]), Vec3(*d["v"]), float(d["yaw"]), float(d["yaw_rate"])
    )


def save_episode(record: EpisodeRecord, directory, intr: CameraIntrinsics) -> None:
    """Persist one episode: steps.jsonl + PGM frames + world + seed."""
    os.makedirs(directory, exist_ok=True)
    frames_dir = os.path.join(directory, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    save_world(record.world, os.path.join(directory, "world.txt"))
    with open(os.path.join(directory, "meta.txt"), "w") as f:
        f.write(f"seed {record.seed}\n")
    lines = []
    for t in range(len(record)):
        state = record.states[t]
        rel = f"frames/{t:06d}.pgm"
        pose = CameraPose(state.position, state.yaw)
        save_depth_image(os.path.join(directory, rel), record.frames[t], intr, pose)
        lines.append(
            json.dumps(
                {
                    "t": t,
                    "state": _state_to_json(state),
                    "action": list(record.actions[t].as_array()),
                    "reward": record.rewards[t],
                    "term": record.terminations[t].value,
                    "frame": rel,
                },
                sort_keys=True,
            )
        )
    with open(os.path.join(directory, "steps.jsonl"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_episode(directory) -> EpisodeRecord:
    world = load_world(os.path.join(directory, "world.txt"))
    with open(os.path.join(directory, "meta.txt")) as f:
        seed = int(f.read().split()[1])
    record = EpisodeRecord([], [], [], [], [], world, seed)
    with open(os.path.join(directory, "steps.jsonl")) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            img, _, _ = load_depth_image(os.path.join(directory, d["frame"]))
            record.frames.append(img)
            record.states.append(_state_from_json(d["state"]))
            record.actions.append(Action.from_array(d["action"]))
            record.rewards.append(float(d["reward"]))
            record.terminations.append(Termination(d["term"]))
    return record
