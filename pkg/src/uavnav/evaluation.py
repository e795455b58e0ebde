"""Multi-seed evaluation protocol, per-run metrics, and report files."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraIntrinsics
from .env import EnvConfig, NavigationEnv, Termination
from .geometry import WorldConfig, generate_world
from .policy import (
    AblationMode,
    PolicyParams,
    RepresentationStack,
    act,
)
from .representation import MemoryParams, TrainConfig, VaeParams, train_lstm
from .util import derived_rng, derived_seed, parallel_map

DEFAULT_SWEEP_T = (1, 5, 10, 15, 20, 30)


@dataclass(frozen=True)
class EvalProtocol:
    seeds: int = 4
    runs_per_seed: int = 25
    deterministic: bool = True
    master_seed: int = 0
    # Average speed over successful runs only by default; crashed runs
    # truncate arbitrarily and would bias the metric.
    speed_all_runs: bool = False

    def __post_init__(self):
        if self.seeds < 1 or self.runs_per_seed < 1:
            raise ValueError("need at least one seed and one run")


@dataclass
class EvalAgent:
    """A trained policy plus the frozen representations it was trained on."""

    policy: PolicyParams
    mode: AblationMode
    vae: VaeParams
    mem: MemoryParams | None = None


@dataclass
class RunRecord:
    seed_index: int
    run_index: int
    termination: Termination
    path_length: float
    steps: int
    mean_hor_speed: float
    positions: np.ndarray  # (n+1, 3) including the start pose
    velocities: np.ndarray


@dataclass
class EvalReport:
    protocol: EvalProtocol
    runs: list

    @property
    def success_rate(self) -> float:
        ok = sum(r.termination is Termination.ARRIVED for r in self.runs)
        return ok / len(self.runs)

    @property
    def average_speed(self) -> float:
        if self.protocol.speed_all_runs:
            pool = self.runs
        else:
            pool = [r for r in self.runs if r.termination is Termination.ARRIVED]
        if not pool:
            return 0.0
        return float(np.mean([r.mean_hor_speed for r in pool]))

    def to_csv_text(self) -> str:
        lines = ["seed,run,termination,path_length,steps,mean_hor_speed"]
        for r in self.runs:
            lines.append(
                f"{r.seed_index},{r.run_index},{r.termination.value},"
                f"{r.path_length!r},{r.steps},{r.mean_hor_speed!r}"
            )
        return "\n".join(lines) + "\n"

    def to_text_table(self) -> str:
        head = f"{'seed':>4} {'run':>4} {'termination':>12} {'path_m':>9} {'steps':>6} {'speed':>7}"
        rows = [head, "-" * len(head)]
        for r in self.runs:
            rows.append(
                f"{r.seed_index:>4} {r.run_index:>4} {r.termination.value:>12} "
                f"{r.path_length:>9.3f} {r.steps:>6} {r.mean_hor_speed:>7.3f}"
            )
        rows.append("-" * len(head))
        rows.append(
            f"runs {len(self.runs)}  success_rate {self.success_rate:.4f}  "
            f"average_speed {self.average_speed:.4f}"
        )
        return "\n".join(rows) + "\n"


def aggregates_from_csv_text(text: str, speed_all_runs: bool = False):
    """Recompute (success_rate, average_speed) from exported per-run rows."""
    lines = [ln for ln in text.splitlines()[1:] if ln.strip()]
    terms, speeds = [], []
    for ln in lines:
        _, _, term, _, _, speed = ln.split(",")
        terms.append(term)
        speeds.append(float(speed))
    ok = [i for i, t in enumerate(terms) if t == Termination.ARRIVED.value]
    success = len(ok) / len(terms)
    pool = range(len(terms)) if speed_all_runs else ok
    avg = float(np.mean([speeds[i] for i in pool])) if len(list(pool)) else 0.0
    return success, avg


def _run_one(args):
    (agent, protocol, world_cfg, env_cfg, intr, s, r) = args
    world = generate_world(
        replace(world_cfg, seed=derived_seed(protocol.master_seed, 7, s, r))
    )
    stack = RepresentationStack(
        agent.mode, agent.vae, agent.mem if agent.mode.uses_memory else None
    )
    stack.reset_batch(1)
    env = NavigationEnv(world, env_cfg, intr)
    rng = derived_rng(protocol.master_seed, 8, s, r)
    out = env.reset()
    positions = [env.state.position.as_array()]
    velocities = [env.state.velocity.as_array()]

    def observe(o):
        frame = env.last_frame
        mem = stack.update((frame.data / frame.max_range)[None, None])
        return np.concatenate([o.observation.state_vector(), mem[0]])

    obs = observe(out)
    while not env.done:
        from .dynamics import Action

        action, _, _ = act(obs, agent.policy, rng, deterministic=protocol.deterministic)
        out = env.step(Action.from_array(action))
        positions.append(env.state.position.as_array())
        velocities.append(env.state.velocity.as_array())
        obs = observe(out)
    positions = np.asarray(positions)
    velocities = np.asarray(velocities)
    deltas = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    hor = np.hypot(velocities[1:, 0], velocities[1:, 1])
    return RunRecord(
        seed_index=s,
        run_index=r,
        termination=out.termination,
        path_length=float(deltas.sum()),
        steps=env.steps,
        mean_hor_speed=float(hor.mean()) if len(hor) else 0.0,
        positions=positions,
        velocities=velocities,
    )


def run_eval(
    agent: EvalAgent,
    protocol: EvalProtocol,
    world_cfg: WorldConfig,
    env_cfg: EnvConfig = EnvConfig(),
    intr: CameraIntrinsics = CameraIntrinsics(),
    workers: int = 1,
) -> EvalReport:
    """seeds x runs_per_seed rollouts in freshly generated worlds.

    Every run derives its own world seed and RNG stream from
    (protocol.master_seed, seed index, run index), so reports are identical
    for any worker count.
    """
    jobs = [
        (agent, protocol, world_cfg, env_cfg, intr, s, r)
        for s in range(protocol.seeds)
        for r in range(protocol.runs_per_seed)
    ]
    runs = parallel_map(_run_one, jobs, workers=workers)
    return EvalReport(protocol=protocol, runs=runs)


def export_trajectories(report: EvalReport, directory) -> None:
    """Per-run JSONL time series plus one gnuplot-style whitespace table."""
    import json

    os.makedirs(directory, exist_ok=True)
    dat_lines = ["# run t x y z vx vy vz speed terminal"]
    for rec in report.runs:
        rid = f"run_{rec.seed_index:02d}_{rec.run_index:03d}"
        n = len(rec.positions)
        with open(os.path.join(directory, rid + ".jsonl"), "w") as f:
            for t in range(n):
                p = rec.positions[t]
                v = rec.velocities[t]
                speed = float(math.hypot(v[0], v[1]))
                term = rec.termination.value if t == n - 1 else Termination.RUNNING.value
                f.write(
                    json.dumps(
                        {
                            "t": t,
                            "p": [float(x) for x in p],
                            "v": [float(x) for x in v],
                            "speed": speed,
                            "term": term,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        for t in range(n):
            p = [float(x) for x in rec.positions[t]]
            v = [float(x) for x in rec.velocities[t]]
            speed = math.hypot(v[0], v[1])
            terminal = 1 if t == n - 1 else 0
            dat_lines.append(
                f"{rid} {t} {p[0]!r} {p[1]!r} {p[2]!r} "
                f"{v[0]!r} {v[1]!r} {v[2]!r} {speed!r} {terminal}"
            )
        dat_lines.append("")
    with open(os.path.join(directory, "trajectories.dat"), "w") as f:
        f.write("\n".join(dat_lines) + "\n")


def save_report(report: EvalReport, directory, name: str = "report") -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, name + ".csv"), "w") as f:
        f.write(report.to_csv_text())
    with open(os.path.join(directory, name + ".txt"), "w") as f:
        f.write(report.to_text_table())


@dataclass
class SweepRow:
    interval: int
    success_rate: float
    average_speed: float


@dataclass
class SweepReport:
    rows: list

    def to_text_table(self) -> str:
        ts = " ".join(f"{r.interval:>6}" for r in self.rows)
        ss = " ".join(f"{r.success_rate:>6.2f}" for r in self.rows)
        vs = " ".join(f"{r.average_speed:>6.2f}" for r in self.rows)
        return (
            f"{'T':>14} {ts}\n{'success rate':>14} {ss}\n{'avg speed':>14} {vs}\n"
        )

    def to_csv_text(self) -> str:
        lines = ["T,success_rate,average_speed"]
        for r in self.rows:
            lines.append(f"{r.interval},{r.success_rate!r},{r.average_speed!r}")
        return "\n".join(lines) + "\n"


def sweep_temporal_interval(
    t_values,
    episodes,
    vae: VaeParams,
    lstm_cfg: TrainConfig,
    train_policy_fn,
    protocol: EvalProtocol,
    world_cfg: WorldConfig,
    env_cfg: EnvConfig = EnvConfig(),
    intr: CameraIntrinsics = CameraIntrinsics(),
    workers: int = 1,
) -> SweepReport:
    """Train a memory module and final policy per interval, then evaluate.

    train_policy_fn(mem) -> PolicyParams keeps the policy budget and mode
    under the caller's control; the sweep owns only the loop shape.
    """
    rows = []
    for t in t_values:
        mem, _ = train_lstm(episodes, vae, lstm_cfg, interval=int(t))
        policy = train_policy_fn(mem)
        agent = EvalAgent(policy=policy, mode=AblationMode.CAME, vae=vae, mem=mem)
        report = run_eval(agent, protocol, world_cfg, env_cfg, intr, workers=workers)
        rows.append(
            SweepRow(
                interval=int(t),
                success_rate=report.success_rate,
                average_speed=report.average_speed,
            )
        )
    return SweepReport(rows=rows)
